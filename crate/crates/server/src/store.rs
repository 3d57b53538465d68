//! Append-only per-device record logs.
//!
//! `records/<imei>.log` holds 64-byte wire-format records in arrival order.
//! `records/<imei>.idx` holds one 24-byte entry per record:
//! seq u32 | offset u64 | received_at u64 | transport u8 | 3 zero bytes, big-endian.
//! The log is authoritative; the index is rebuilt from it when the two disagree.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use radfleet_core::wire::{Imei, TelemetryRecord, RECORD_LEN};
use serde::{Deserialize, Serialize};

use crate::ServerError;

pub const RECORDS_DIR: &str = "records";
pub const INDEX_ENTRY_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
    Sms,
    Usb,
}

impl Transport {
    fn code(self) -> u8 {
        match self {
            Transport::Tcp => 0,
            Transport::Udp => 1,
            Transport::Sms => 2,
            Transport::Usb => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Transport::Tcp,
            1 => Transport::Udp,
            2 => Transport::Sms,
            3 => Transport::Usb,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistedRecord {
    pub record: TelemetryRecord,
    pub received_at_ms: u64,
    pub transport: Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Fresh,
    Duplicate,
    /// Same (imei, seq) as a stored record but different bytes; the stored copy wins.
    Tamper,
}

#[derive(Debug)]
struct DeviceLog {
    files: Option<(File, File)>,
    records: Vec<PersistedRecord>,
    by_seq: HashMap<u32, usize>,
}

#[derive(Debug)]
pub struct RecordStore {
    dir: PathBuf,
    fsync: bool,
    read_only: bool,
    devices: BTreeMap<Imei, DeviceLog>,
}

fn encode_index(seq: u32, offset: u64, received_at_ms: u64, transport: Transport) -> [u8; INDEX_ENTRY_LEN] {
    let mut e = [0u8; INDEX_ENTRY_LEN];
    e[0..4].copy_from_slice(&seq.to_be_bytes());
    e[4..12].copy_from_slice(&offset.to_be_bytes());
    e[12..20].copy_from_slice(&received_at_ms.to_be_bytes());
    e[20] = transport.code();
    e
}

impl RecordStore {
    /// Opens every device log under `data_dir`. A writable store truncates a torn trailing
    /// record and repairs the index; a read-only store ignores torn tails.
    pub fn open(data_dir: &Path, fsync: bool, read_only: bool, now_ms: u64) -> Result<Self, ServerError> {
        let dir = data_dir.join(RECORDS_DIR);
        if !read_only {
            fs::create_dir_all(&dir)?;
        }
        let mut store = RecordStore {
            dir: dir.clone(),
            fsync,
            read_only,
            devices: BTreeMap::new(),
        };
        if !dir.exists() {
            return Ok(store);
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect();
        names.sort();
        for path in names {
            let Some(imei) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<Imei>().ok()) else {
                warn!("ignoring {}", path.display());
                continue;
            };
            let log = store.load_device(imei, now_ms)?;
            store.devices.insert(imei, log);
        }
        Ok(store)
    }

    fn paths(&self, imei: Imei) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{imei}.log")), self.dir.join(format!("{imei}.idx")))
    }

    fn load_device(&self, imei: Imei, now_ms: u64) -> Result<DeviceLog, ServerError> {
        let (log_path, idx_path) = self.paths(imei);
        let mut bytes = Vec::new();
        File::open(&log_path)?.read_to_end(&mut bytes)?;
        let whole = bytes.len() / RECORD_LEN * RECORD_LEN;
        if whole != bytes.len() {
            warn!("{}: dropping {} bytes of a torn record", log_path.display(), bytes.len() - whole);
            if !self.read_only {
                OpenOptions::new().write(true).open(&log_path)?.set_len(whole as u64)?;
            }
            bytes.truncate(whole);
        }
        let mut idx = Vec::new();
        if idx_path.exists() {
            File::open(&idx_path)?.read_to_end(&mut idx)?;
        }

        let mut log = DeviceLog {
            files: None,
            records: Vec::with_capacity(whole / RECORD_LEN),
            by_seq: HashMap::new(),
        };
        let mut consistent = 0usize;
        for (i, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
            let record = TelemetryRecord::decode(chunk)
                .map_err(|e| ServerError::Corrupt(format!("{} record {i}: {e}", log_path.display())))?;
            let entry = idx.get(i * INDEX_ENTRY_LEN..(i + 1) * INDEX_ENTRY_LEN);
            let meta = entry.and_then(|e| {
                let seq = u32::from_be_bytes(e[0..4].try_into().unwrap());
                let offset = u64::from_be_bytes(e[4..12].try_into().unwrap());
                let received = u64::from_be_bytes(e[12..20].try_into().unwrap());
                let transport = Transport::from_code(e[20])?;
                (seq == record.seq && offset == (i * RECORD_LEN) as u64).then_some((received, transport))
            });
            let (received_at_ms, transport) = match meta {
                Some(m) if consistent == i => {
                    consistent += 1;
                    m
                }
                _ => (now_ms, Transport::Tcp),
            };
            log.by_seq.entry(record.seq).or_insert(i);
            log.records.push(PersistedRecord {
                record,
                received_at_ms,
                transport,
            });
        }

        if !self.read_only {
            if consistent < log.records.len() || idx.len() != consistent * INDEX_ENTRY_LEN {
                info!("{}: rebuilding index from record {consistent}", idx_path.display());
                let f = OpenOptions::new().create(true).write(true).truncate(false).open(&idx_path)?;
                f.set_len((consistent * INDEX_ENTRY_LEN) as u64)?;
                drop(f);
                let mut f = OpenOptions::new().append(true).open(&idx_path)?;
                let mut tail = Vec::new();
                for (i, p) in log.records.iter().enumerate().skip(consistent) {
                    tail.extend_from_slice(&encode_index(p.record.seq, (i * RECORD_LEN) as u64, p.received_at_ms, p.transport));
                }
                f.write_all(&tail)?;
                f.sync_all()?;
            }
            log.files = Some(self.open_files(imei)?);
        }
        Ok(log)
    }

    fn open_files(&self, imei: Imei) -> Result<(File, File), ServerError> {
        let (log_path, idx_path) = self.paths(imei);
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        Ok((open(&log_path)?, open(&idx_path)?))
    }

    /// Classifies each record against the store and durably appends the fresh ones, log first
    /// and index second. Nothing is visible in memory until both writes succeed.
    pub fn append(
        &mut self,
        imei: Imei,
        records: &[TelemetryRecord],
        received_at_ms: u64,
        transport: Transport,
    ) -> Result<Vec<AppendOutcome>, ServerError> {
        if self.read_only {
            return Err(ServerError::Storage("store is read-only".into()));
        }
        if !self.devices.contains_key(&imei) {
            let files = self.open_files(imei)?;
            self.devices.insert(
                imei,
                DeviceLog {
                    files: Some(files),
                    records: Vec::new(),
                    by_seq: HashMap::new(),
                },
            );
        }
        let fsync = self.fsync;
        let dev = self.devices.get_mut(&imei).expect("inserted above");

        let mut outcomes = Vec::with_capacity(records.len());
        let mut fresh: Vec<TelemetryRecord> = Vec::new();
        let mut batch: HashMap<u32, TelemetryRecord> = HashMap::new();
        for r in records {
            let existing = dev.by_seq.get(&r.seq).map(|&i| dev.records[i].record).or_else(|| batch.get(&r.seq).copied());
            outcomes.push(match existing {
                None => {
                    batch.insert(r.seq, *r);
                    fresh.push(*r);
                    AppendOutcome::Fresh
                }
                Some(stored) if stored.encode() == r.encode() => AppendOutcome::Duplicate,
                Some(_) => AppendOutcome::Tamper,
            });
        }
        if fresh.is_empty() {
            return Ok(outcomes);
        }

        let base = dev.records.len();
        let mut log_bytes = Vec::with_capacity(fresh.len() * RECORD_LEN);
        let mut idx_bytes = Vec::with_capacity(fresh.len() * INDEX_ENTRY_LEN);
        for (k, r) in fresh.iter().enumerate() {
            log_bytes.extend_from_slice(&r.encode());
            idx_bytes.extend_from_slice(&encode_index(r.seq, ((base + k) * RECORD_LEN) as u64, received_at_ms, transport));
        }
        let (log_file, idx_file) = dev.files.as_mut().expect("writable store has open files");
        let write = |f: &mut File, bytes: &[u8], old_len: u64| -> Result<(), ServerError> {
            let res = f.write_all(bytes).and_then(|_| if fsync { f.sync_data() } else { Ok(()) });
            if let Err(e) = res {
                // Roll back a partial append so the next one stays record-aligned.
                let _ = f.set_len(old_len);
                return Err(ServerError::Storage(e.to_string()));
            }
            Ok(())
        };
        write(log_file, &log_bytes, (base * RECORD_LEN) as u64)?;
        if let Err(e) = write(idx_file, &idx_bytes, (base * INDEX_ENTRY_LEN) as u64) {
            let _ = log_file.set_len((base * RECORD_LEN) as u64);
            return Err(e);
        }

        for (k, r) in fresh.into_iter().enumerate() {
            dev.by_seq.insert(r.seq, base + k);
            dev.records.push(PersistedRecord {
                record: r,
                received_at_ms,
                transport,
            });
        }
        Ok(outcomes)
    }

    /// Records of one device in arrival order.
    pub fn records(&self, imei: Imei) -> &[PersistedRecord] {
        self.devices.get(&imei).map_or(&[], |d| &d.records)
    }

    pub fn devices(&self) -> impl Iterator<Item = Imei> + '_ {
        self.devices.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.devices.values().map(|d| d.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, imei: Imei, seq: u32) -> bool {
        self.devices.get(&imei).is_some_and(|d| d.by_seq.contains_key(&seq))
    }
}

/// Replaces `path` with `bytes` via a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServerError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
