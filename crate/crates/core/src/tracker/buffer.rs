//! Store-and-forward record buffer modelling the tracker's flash.
//!
//! Records are kept in their 64-byte wire encoding. Priority (alert) records and ordinary
//! records live in separate seq-ordered queues so that overflow can evict the oldest ordinary
//! record first; draining merges the two queues back into global seq order.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::Path;

use crate::wire::{flags, RecordError, TelemetryRecord, RECORD_LEN};

type Slot = [u8; RECORD_LEN];

fn slot_seq(slot: &Slot) -> u32 {
    u32::from_be_bytes(slot[50..54].try_into().expect("4 bytes"))
}

fn slot_priority(slot: &Slot) -> bool {
    slot[8] & flags::PRIORITY != 0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordBuffer {
    capacity_bytes: usize,
    normal: VecDeque<Slot>,
    priority: VecDeque<Slot>,
    evicted: u64,
    /// Highest seq ever handed out for transmission.
    sent_through: Option<u32>,
    /// Highest seq already marked as a buffered replay.
    replay_marked_through: Option<u32>,
}

impl RecordBuffer {
    pub fn new(capacity_bytes: usize) -> Self {
        RecordBuffer {
            capacity_bytes,
            normal: VecDeque::new(),
            priority: VecDeque::new(),
            evicted: 0,
            sent_through: None,
            replay_marked_through: None,
        }
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn capacity_records(&self) -> usize {
        self.capacity_bytes / RECORD_LEN
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.priority.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occupancy_bytes(&self) -> usize {
        self.len() * RECORD_LEN
    }

    /// Records dropped to make room since the buffer was created.
    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Append a record. Records must arrive in increasing seq order. When full, the oldest
    /// ordinary record is evicted, or the oldest priority record if there are no ordinary ones.
    pub fn push(&mut self, record: &TelemetryRecord) {
        debug_assert!(self.last_seq().is_none_or(|s| s < record.seq));
        if self.capacity_records() == 0 {
            self.evicted += 1;
            return;
        }
        if self.len() >= self.capacity_records() {
            if self.normal.pop_front().or_else(|| self.priority.pop_front()).is_some() {
                self.evicted += 1;
            }
        }
        let slot = record.encode();
        if record.is_priority() {
            self.priority.push_back(slot);
        } else {
            self.normal.push_back(slot);
        }
    }

    fn last_seq(&self) -> Option<u32> {
        let n = self.normal.back().map(slot_seq);
        let p = self.priority.back().map(slot_seq);
        n.max(p)
    }

    /// Oldest-first iterator over encoded slots, in seq order.
    fn merged(&self) -> impl Iterator<Item = &Slot> {
        let mut n = self.normal.iter().peekable();
        let mut p = self.priority.iter().peekable();
        std::iter::from_fn(move || match (n.peek(), p.peek()) {
            (Some(a), Some(b)) => {
                if slot_seq(a) < slot_seq(b) {
                    n.next()
                } else {
                    p.next()
                }
            }
            (Some(_), None) => n.next(),
            (None, Some(_)) => p.next(),
            (None, None) => None,
        })
    }

    /// The oldest `max` records in seq order, without removing them. They count as sent from
    /// now on, so later replay marking leaves their bytes alone.
    pub fn take_batch(&mut self, max: usize) -> Vec<TelemetryRecord> {
        let batch: Vec<TelemetryRecord> = self
            .merged()
            .take(max)
            .map(|s| TelemetryRecord::decode(s).expect("buffer holds records it encoded"))
            .collect();
        if let Some(last) = batch.last() {
            self.sent_through = self.sent_through.max(Some(last.seq));
        }
        batch
    }

    /// Peek without marking anything as sent.
    pub fn records(&self) -> Vec<TelemetryRecord> {
        self.merged()
            .map(|s| TelemetryRecord::decode(s).expect("buffer holds records it encoded"))
            .collect()
    }

    /// Remove acknowledged records by seq. Seqs that were evicted meanwhile are skipped.
    pub fn acknowledge(&mut self, seqs: &[u32]) -> usize {
        let mut removed = 0;
        for &seq in seqs {
            if self.normal.front().map(slot_seq) == Some(seq) {
                self.normal.pop_front();
                removed += 1;
            } else if self.priority.front().map(slot_seq) == Some(seq) {
                self.priority.pop_front();
                removed += 1;
            }
        }
        removed
    }

    /// Flag every never-sent record as a buffered replay. Each record is flagged at most once
    /// and records already handed out for transmission keep their bytes.
    pub fn mark_replay(&mut self) {
        let Some(last) = self.last_seq() else {
            return;
        };
        let floor = self.sent_through.max(self.replay_marked_through);
        for queue in [&mut self.normal, &mut self.priority] {
            for slot in queue.iter_mut().rev() {
                if floor.is_some_and(|f| slot_seq(slot) <= f) {
                    break;
                }
                slot[8] |= flags::BUFFERED_REPLAY;
            }
        }
        self.replay_marked_through = Some(last);
    }

    /// Flash image: every buffered record in seq order, 64 bytes each.
    pub fn to_image(&self) -> Vec<u8> {
        self.merged().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn from_image(bytes: &[u8], capacity_bytes: usize) -> Result<Self, RecordError> {
        if bytes.len() % RECORD_LEN != 0 {
            return Err(RecordError::WrongLength(bytes.len() % RECORD_LEN));
        }
        let mut buffer = RecordBuffer::new(capacity_bytes);
        for chunk in bytes.chunks_exact(RECORD_LEN) {
            let record = TelemetryRecord::decode(chunk)?;
            if buffer.last_seq().is_some_and(|s| s >= record.seq) {
                return Err(RecordError::BadField("seq"));
            }
            let slot: Slot = chunk.try_into().expect("chunk length");
            if slot_priority(&slot) {
                buffer.priority.push_back(slot);
            } else {
                buffer.normal.push_back(slot);
            }
        }
        Ok(buffer)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_image())
    }

    pub fn load(path: &Path, capacity_bytes: usize) -> io::Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_image(&bytes, capacity_bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}
