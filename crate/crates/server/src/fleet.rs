//! Server state shared by every transport and the HTTP API.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use log::{info, warn};
use radfleet_analytics::{FleetCalendar, MaintenancePlan, Mission, MissionBook};
use radfleet_core::wire::{Ack, Command, Imei, TelemetryRecord, TextMessage, RECORD_LEN};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::clock::Clock;
use crate::commands::{Channel, CommandLog, CommandRecord, CommandStatus};
use crate::config::ServerConfig;
use crate::events::{Alert, Fanout, PositionSnapshot, StreamEvent, Subscription};
use crate::registry::{DeviceEntry, Registry};
use crate::store::{write_atomic, AppendOutcome, RecordStore, Transport};
use crate::ServerError;

pub const MISSIONS_FILE: &str = "missions.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    ReadWrite,
    /// For offline report runs next to a live server: no repairs, no writes.
    ReadOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub frames: u64,
    pub fresh: u64,
    pub duplicates: u64,
    pub tamper: u64,
    pub rejected_logins: u64,
}

/// A command waiting on the simulated SMS channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsOut {
    pub command_id: u32,
    pub imei: Imei,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleView {
    pub imei: String,
    pub label: String,
    pub enabled: bool,
    pub class: Option<String>,
    pub online: bool,
    pub last: Option<PositionSnapshot>,
    pub age_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissionInput {
    #[serde(default)]
    pub id: Option<String>,
    pub vehicle: String,
    pub driver: String,
    #[serde(default)]
    pub purpose: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReplaySummary {
    pub records: usize,
    pub fresh: usize,
    pub duplicates: usize,
}

pub struct SessionHandle {
    pub id: u64,
    pub commands: mpsc::UnboundedReceiver<TextMessage>,
}

pub(crate) struct State {
    pub registry: Registry,
    pub store: RecordStore,
    latest: HashMap<Imei, TelemetryRecord>,
    alerts: Vec<Alert>,
    fanout: Fanout,
    sessions: HashMap<Imei, (u64, mpsc::UnboundedSender<TextMessage>)>,
    next_session: u64,
    commands: CommandLog,
    sms_outbox: Vec<SmsOut>,
    pub missions: MissionBook,
    pub plan: MaintenancePlan,
    stats: IngestStats,
}

pub struct FleetServer {
    config: ServerConfig,
    calendar: FleetCalendar,
    clock: Arc<dyn Clock>,
    mode: OpenMode,
    state: Mutex<State>,
}

impl FleetServer {
    /// Opens (or creates) the data directory, repairs torn writes and applies the registry
    /// seed from the config.
    pub fn open(config: ServerConfig, clock: Arc<dyn Clock>, mode: OpenMode) -> Result<Arc<Self>, ServerError> {
        config.validate()?;
        let dir = config.data_dir.clone();
        let writable = mode == OpenMode::ReadWrite;
        if writable {
            std::fs::create_dir_all(&dir)?;
        }
        let now = clock.now_ms();
        let mut registry = Registry::load(&dir)?;
        if writable {
            let mut changed = false;
            for seed in &config.devices {
                let imei: Imei = seed
                    .imei
                    .parse()
                    .map_err(|_| ServerError::Config(format!("bad IMEI {}", seed.imei)))?;
                if registry.get(imei).is_none() {
                    registry.add(DeviceEntry {
                        imei: seed.imei.clone(),
                        label: seed.label.clone(),
                        enabled: seed.enabled,
                        class: seed.class.clone(),
                        tank_capacity_l: seed.tank_capacity_l,
                        speed_limit_kmh: seed.speed_limit_kmh,
                        created_at_ms: now,
                    })?;
                    changed = true;
                }
            }
            if changed {
                registry.save(&dir)?;
            }
        }
        let store = RecordStore::open(&dir, config.fsync, !writable, now)?;
        let missions = load_missions(&dir)?;
        let commands = CommandLog::open(&dir, writable)?;
        let mut plan = MaintenancePlan::default();
        for item in &config.maintenance {
            plan.add(item.clone()).map_err(|e| ServerError::Config(e.to_string()))?;
        }

        let mut state = State {
            registry,
            store,
            latest: HashMap::new(),
            alerts: Vec::new(),
            fanout: Fanout::default(),
            sessions: HashMap::new(),
            next_session: 1,
            commands,
            sms_outbox: Vec::new(),
            missions,
            plan,
            stats: IngestStats::default(),
        };
        let devices: Vec<Imei> = state.store.devices().collect();
        for imei in devices {
            let label = label_of(&state.registry, imei);
            let recs: Vec<_> = state.store.records(imei).to_vec();
            for p in recs {
                update_latest(&mut state.latest, imei, &p.record);
                if p.record.event_code().is_alert() {
                    let id = state.alerts.len() as u64 + 1;
                    state.alerts.push(alert_for(id, imei, &label, &p.record, p.record.event_code().name(), p.received_at_ms));
                }
            }
        }
        info!(
            "opened {} with {} devices and {} records",
            dir.display(),
            state.registry.devices().count(),
            state.store.len()
        );
        Ok(Arc::new(FleetServer {
            calendar: config.calendar().expect("validated"),
            config,
            clock,
            mode,
            state: Mutex::new(state),
        }))
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn calendar(&self) -> &FleetCalendar {
        &self.calendar
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    fn require_writable(&self) -> Result<(), ServerError> {
        match self.mode {
            OpenMode::ReadWrite => Ok(()),
            OpenMode::ReadOnly => Err(ServerError::Storage("opened read-only".into())),
        }
    }

    // Registry

    pub fn add_device(&self, entry: DeviceEntry) -> Result<DeviceEntry, ServerError> {
        self.require_writable()?;
        let mut st = self.lock();
        let entry = DeviceEntry {
            created_at_ms: self.clock.now_ms(),
            ..entry
        };
        st.registry.add(entry.clone())?;
        st.registry.save(self.data_dir())?;
        Ok(st.registry.resolve(&entry.imei).cloned().expect("just added"))
    }

    pub fn set_enabled(&self, vehicle: &str, enabled: bool) -> Result<DeviceEntry, ServerError> {
        self.require_writable()?;
        let mut st = self.lock();
        let imei = st.registry.resolve(vehicle).ok_or_else(|| ServerError::UnknownDevice(vehicle.into()))?.imei();
        st.registry.get_mut(imei).expect("resolved").enabled = enabled;
        st.registry.save(self.data_dir())?;
        if !enabled {
            st.sessions.remove(&imei);
        }
        Ok(st.registry.get(imei).cloned().expect("resolved"))
    }

    pub fn devices(&self) -> Vec<DeviceEntry> {
        self.lock().registry.devices().cloned().collect()
    }

    pub fn resolve(&self, vehicle: &str) -> Result<DeviceEntry, ServerError> {
        self.lock()
            .registry
            .resolve(vehicle)
            .cloned()
            .ok_or_else(|| ServerError::UnknownDevice(vehicle.into()))
    }

    // Ingest

    /// Login succeeds for registered, enabled devices only.
    pub fn login(&self, imei: Imei) -> bool {
        let mut st = self.lock();
        let ok = st.registry.is_enabled(imei);
        if !ok {
            st.stats.rejected_logins += 1;
            warn!("login rejected for {imei}");
        }
        ok
    }

    /// Stores the fresh records of one frame and returns the ack to send. Duplicates are
    /// acknowledged but not stored again. Nothing is acknowledged unless the write succeeded.
    pub fn ingest(&self, imei: Imei, records: &[TelemetryRecord], transport: Transport) -> Result<Ack, ServerError> {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        if !st.registry.is_enabled(imei) {
            return Err(ServerError::UnknownDevice(imei.to_string()));
        }
        let outcomes = st.store.append(imei, records, now, transport)?;
        let label = label_of(&st.registry, imei);
        st.stats.frames += 1;
        for (r, outcome) in records.iter().zip(outcomes) {
            match outcome {
                AppendOutcome::Fresh => {
                    st.stats.fresh += 1;
                    update_latest(&mut st.latest, imei, r);
                    let snapshot = StreamEvent::Position(PositionSnapshot::new(imei, &label, r));
                    st.fanout.publish(imei, &snapshot);
                    if r.event_code().is_alert() {
                        push_alert(&mut st, imei, &label, r, r.event_code().name(), now);
                    }
                }
                AppendOutcome::Duplicate => st.stats.duplicates += 1,
                AppendOutcome::Tamper => {
                    st.stats.tamper += 1;
                    warn!("tamper: {imei} seq {} resent with different content", r.seq);
                    push_alert(&mut st, imei, &label, r, "Tamper", now);
                }
            }
        }
        Ok(Ack {
            accepted_count: records.len() as u16,
        })
    }

    /// Loads a device flash image (a sequence of 64-byte records) as an offline USB replay.
    pub fn ingest_image(&self, vehicle: &str, image: &[u8]) -> Result<ReplaySummary, ServerError> {
        self.require_writable()?;
        let imei = self.resolve(vehicle)?.imei();
        if image.len() % RECORD_LEN != 0 {
            return Err(ServerError::BadRequest(format!("image length {} is not a multiple of 64", image.len())));
        }
        let records: Vec<TelemetryRecord> = image
            .chunks_exact(RECORD_LEN)
            .map(TelemetryRecord::decode)
            .collect::<Result<_, _>>()
            .map_err(|e| ServerError::BadRequest(format!("image: {e}")))?;
        let before = self.lock().stats;
        for chunk in records.chunks(255) {
            self.ingest(imei, chunk, Transport::Usb)?;
        }
        let after = self.lock().stats;
        Ok(ReplaySummary {
            records: records.len(),
            fresh: (after.fresh - before.fresh) as usize,
            duplicates: (after.duplicates - before.duplicates) as usize,
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.lock().stats
    }

    pub fn record_count(&self) -> usize {
        self.lock().store.len()
    }

    /// Stored records of one device in arrival order, with their receive metadata.
    pub fn stored(&self, imei: Imei) -> Vec<crate::store::PersistedRecord> {
        self.lock().store.records(imei).to_vec()
    }

    /// Records with `from <= timestamp < to`, ordered by timestamp then seq.
    pub fn query_track(&self, vehicle: &str, from_ms: u64, to_ms: u64) -> Result<Vec<TelemetryRecord>, ServerError> {
        let imei = self.resolve(vehicle)?.imei();
        let mut out: Vec<TelemetryRecord> = self
            .lock()
            .store
            .records(imei)
            .iter()
            .map(|p| p.record)
            .filter(|r| r.timestamp_ms >= from_ms && r.timestamp_ms < to_ms)
            .collect();
        out.sort_by_key(|r| (r.timestamp_ms, r.seq));
        Ok(out)
    }

    /// One entry per enabled device.
    pub fn latest_positions(&self) -> Vec<VehicleView> {
        let now = self.clock.now_ms();
        let st = self.lock();
        st.registry
            .devices()
            .filter(|d| d.enabled)
            .map(|d| {
                let imei = d.imei();
                let last = st.latest.get(&imei);
                VehicleView {
                    imei: d.imei.clone(),
                    label: d.label.clone(),
                    enabled: d.enabled,
                    class: d.class.clone(),
                    online: st.sessions.contains_key(&imei),
                    last: last.map(|r| PositionSnapshot::new(imei, &d.label, r)),
                    age_s: last.map(|r| now.saturating_sub(r.timestamp_ms) as f64 / 1000.0),
                }
            })
            .collect()
    }

    pub fn latest_record(&self, imei: Imei) -> Option<TelemetryRecord> {
        self.lock().latest.get(&imei).copied()
    }

    pub fn alerts_since(&self, since_id: u64) -> Vec<Alert> {
        self.lock().alerts.iter().filter(|a| a.id > since_id).cloned().collect()
    }

    pub fn subscribe(&self, filter: Option<Imei>) -> Subscription {
        self.lock().fanout.subscribe(filter, self.config.subscriber_backlog)
    }

    pub fn subscriber_count(&self) -> usize {
        self.lock().fanout.len()
    }

    // Sessions and commands

    pub fn attach_session(&self, imei: Imei) -> SessionHandle {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut st = self.lock();
        let id = st.next_session;
        st.next_session += 1;
        st.sessions.insert(imei, (id, tx));
        SessionHandle { id, commands: rx }
    }

    pub fn detach_session(&self, imei: Imei, id: u64) {
        let mut st = self.lock();
        if st.sessions.get(&imei).is_some_and(|(sid, _)| *sid == id) {
            st.sessions.remove(&imei);
        }
    }

    pub fn is_online(&self, imei: Imei) -> bool {
        self.lock().sessions.contains_key(&imei)
    }

    /// Queues a command, then hands it to the live session if there is one, else to the
    /// simulated SMS channel. Each transition is written to the audit log.
    pub fn send_command(&self, vehicle: &str, command: &Command) -> Result<CommandRecord, ServerError> {
        self.require_writable()?;
        let now = self.clock.now_ms();
        let mut st = self.lock();
        let device = st
            .registry
            .resolve(vehicle)
            .cloned()
            .ok_or_else(|| ServerError::UnknownDevice(vehicle.into()))?;
        let imei = device.imei();
        let online = st.sessions.get(&imei).is_some_and(|(_, tx)| !tx.is_closed());
        if !online && !self.config.sms_simulation {
            return Err(ServerError::NoRoute(device.label));
        }
        let text = command.to_string();
        let mut record = CommandRecord {
            id: st.commands.next_id(),
            imei: imei.to_string(),
            text: text.clone(),
            status: CommandStatus::Queued,
            channel: None,
            reply: None,
            created_ms: now,
            updated_ms: now,
        };
        st.commands.record(record.clone())?;
        publish_command(&mut st, imei, &record);

        let sent = online
            && st.sessions[&imei]
                .1
                .send(TextMessage {
                    id: record.id,
                    text: text.clone(),
                })
                .is_ok();
        if sent {
            record.channel = Some(Channel::Gprs);
        } else if self.config.sms_simulation {
            st.sms_outbox.push(SmsOut {
                command_id: record.id,
                imei,
                text,
            });
            record.channel = Some(Channel::Sms);
        } else {
            return Err(ServerError::NoRoute(device.label));
        }
        record.status = CommandStatus::Delivered;
        st.commands.record(record.clone())?;
        publish_command(&mut st, imei, &record);
        Ok(record)
    }

    /// Reply to a command delivered over the session.
    pub fn on_command_reply(&self, imei: Imei, reply: &TextMessage) {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        let Some(mut c) = st.commands.commands.get(&reply.id).cloned() else {
            warn!("{imei}: reply to unknown command {}", reply.id);
            return;
        };
        if c.imei != imei.to_string() {
            warn!("{imei}: reply to command {} of another device", reply.id);
            return;
        }
        c.status = CommandStatus::Acked;
        c.reply = Some(reply.text.clone());
        c.updated_ms = now;
        if let Err(e) = st.commands.record(c.clone()) {
            warn!("audit write failed: {e}");
        }
        publish_command(&mut st, imei, &c);
    }

    /// SMS from a device to the server's number: acknowledges the oldest command still
    /// waiting on the SMS channel.
    pub fn on_sms(&self, imei: Imei, body: &str) {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        let key = imei.to_string();
        let pending = st
            .commands
            .commands
            .values()
            .find(|c| c.imei == key && c.status == CommandStatus::Delivered && c.channel == Some(Channel::Sms))
            .cloned();
        let Some(mut c) = pending else {
            info!("{imei}: unsolicited SMS '{body}'");
            return;
        };
        c.status = CommandStatus::Acked;
        c.reply = Some(body.to_string());
        c.updated_ms = now;
        if let Err(e) = st.commands.record(c.clone()) {
            warn!("audit write failed: {e}");
        }
        publish_command(&mut st, imei, &c);
    }

    pub fn take_sms_outbox(&self) -> Vec<SmsOut> {
        std::mem::take(&mut self.lock().sms_outbox)
    }

    pub fn commands(&self) -> Vec<CommandRecord> {
        self.lock().commands.commands.values().cloned().collect()
    }

    pub fn command(&self, id: u32) -> Option<CommandRecord> {
        self.lock().commands.commands.get(&id).cloned()
    }

    // Missions

    pub fn add_mission(&self, input: MissionInput) -> Result<Mission, ServerError> {
        self.require_writable()?;
        let device = self.resolve(&input.vehicle)?;
        let mut st = self.lock();
        let id = input
            .id
            .unwrap_or_else(|| format!("M{:04}", st.missions.missions().len() + 1));
        let mission = Mission {
            id,
            vehicle: device.imei.clone(),
            driver: input.driver,
            purpose: input.purpose,
            start_ms: input.start_ms,
            end_ms: input.end_ms,
        };
        st.missions.add(mission.clone())?;
        let text = serde_json::to_string_pretty(&st.missions).expect("missions serialize");
        write_atomic(&self.data_dir().join(MISSIONS_FILE), text.as_bytes())?;
        Ok(mission)
    }

    pub fn missions(&self) -> Vec<Mission> {
        self.lock().missions.missions().to_vec()
    }
}

fn load_missions(dir: &Path) -> Result<MissionBook, ServerError> {
    let path = dir.join(MISSIONS_FILE);
    if !path.exists() {
        return Ok(MissionBook::new());
    }
    serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| ServerError::Corrupt(format!("{}: {e}", path.display())))
}

fn label_of(registry: &Registry, imei: Imei) -> String {
    registry.get(imei).map_or_else(|| imei.to_string(), |d| d.label.clone())
}

/// The cache holds the newest valid fix by device time, so late replays never move it back.
fn update_latest(latest: &mut HashMap<Imei, TelemetryRecord>, imei: Imei, r: &TelemetryRecord) {
    if !r.fix_valid() {
        return;
    }
    match latest.get(&imei) {
        Some(cur) if (cur.timestamp_ms, cur.seq) >= (r.timestamp_ms, r.seq) => {}
        _ => {
            latest.insert(imei, *r);
        }
    }
}

fn alert_for(id: u64, imei: Imei, label: &str, r: &TelemetryRecord, kind: &str, received_at_ms: u64) -> Alert {
    Alert {
        id,
        imei: imei.to_string(),
        vehicle: label.to_string(),
        kind: kind.to_string(),
        seq: r.seq,
        timestamp_ms: r.timestamp_ms,
        received_at_ms,
        lat: r.lat(),
        lon: r.lon(),
    }
}

fn push_alert(st: &mut State, imei: Imei, label: &str, r: &TelemetryRecord, kind: &str, now: u64) {
    let alert = alert_for(st.alerts.len() as u64 + 1, imei, label, r, kind, now);
    st.fanout.publish(imei, &StreamEvent::Alert(alert.clone()));
    st.alerts.push(alert);
}

fn publish_command(st: &mut State, imei: Imei, c: &CommandRecord) {
    st.fanout.publish(imei, &StreamEvent::Command(c.clone()));
}
