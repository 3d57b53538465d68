//! The tracker firmware as a deterministic state machine driven by one `SensorFrame` per tick.

pub mod buffer;
pub mod config;
pub mod events;
pub mod link;
pub mod power;

use std::collections::BTreeSet;

use log::{debug, info, warn};
use thiserror::Error;

use crate::geo::{haversine_distance, zone_transitions, Transition};
use crate::nmea::{fuse_lines, Fix};
use crate::wire::{
    Command, Downlink, EventCode, PositionReport, RecordValues, SmsMessage, TelemetryRecord,
    TextMessage, Uplink, DIN_IGNITION,
};

pub use buffer::RecordBuffer;
pub use config::{ConfigError, TrackerConfig, Transport};
pub use events::{evaluate_acquisition, heading_change, Trigger};
pub use link::{Link, Session};
pub use power::{PowerMode, BATTERY_CAPACITY_UAS};

use events::{EcoMonitor, InputLatch, OverspeedMonitor, TowingMonitor};
use power::MOVING_SPEED_KMH;

/// Everything the firmware samples in one one-second tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub tick_time_ms: u64,
    /// NMEA sentences from the GNSS receiver for this epoch. Ignored while GPS is off.
    pub nmea_lines: Vec<String>,
    pub ignition: bool,
    /// The four general-purpose inputs in bits 0..=3.
    pub digital_in: u8,
    pub analog_mv: [u16; 2],
    pub accel_mg: [i16; 3],
    pub fuel_level_pct: f64,
    pub fuel_rate_lh: f64,
    pub can_odometer_m: Option<f64>,
    pub gsm_available: bool,
    pub gsm_jammed: bool,
    pub driver_key: Option<u64>,
    pub panic_button: bool,
    pub external_power_v: f64,
}

impl SensorFrame {
    /// A parked vehicle on external power with coverage and nothing happening.
    pub fn quiet(tick_time_ms: u64) -> Self {
        SensorFrame {
            tick_time_ms,
            nmea_lines: Vec::new(),
            ignition: false,
            digital_in: 0,
            analog_mv: [0, 0],
            accel_mg: [0, 0, 1000],
            fuel_level_pct: 0.0,
            fuel_rate_lh: 0.0,
            can_odometer_m: None,
            gsm_available: true,
            gsm_jammed: false,
            driver_key: None,
            panic_button: false,
            external_power_v: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandOrigin {
    Sms(String),
    /// The server, over an authenticated GPRS session.
    Session,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandRejected {
    #[error("sender is not on the authorized number list")]
    Unauthorized,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("bad value for '{0}'")]
    BadValue(String),
    #[error("no position fix yet")]
    NoFix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub time_ms: u64,
    pub origin: CommandOrigin,
    pub text: String,
    pub outcome: Result<String, CommandRejected>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrackerError {
    #[error("tick {now} is not after the previous tick {previous}")]
    ClockRegression { previous: u64, now: u64 },
}

/// Something the tracker hands to its radio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    /// Bytes for the GPRS session (TCP stream or one UDP datagram).
    Packet(Vec<u8>),
    Sms(SmsMessage),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub records: Vec<TelemetryRecord>,
    pub outbound: Vec<Outbound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub power_mode: PowerMode,
    /// Battery charge in microampere-seconds (1800 mAh full).
    pub battery_uas: u64,
    pub last_tick_ms: Option<u64>,
    /// Latest valid fix and the tick it arrived on.
    pub last_fix: Option<(u64, Fix)>,
    pub last_sent_fix: Option<Fix>,
    pub last_record_time_ms: Option<u64>,
    pub odometer_m: f64,
    pub zone_membership: BTreeSet<u16>,
    pub buffer: RecordBuffer,
    /// Output lines in bits 0..=3; bit 0 is the immobilizer.
    pub outputs: u8,
    /// Seq of the next record.
    pub seq: u32,
    pub authorized: bool,
    pub driver_key: Option<u64>,
    pub last_activity_ms: Option<u64>,
    pub stationary_since_ms: Option<u64>,
    pub inputs: InputLatch,
    pub overspeed: OverspeedMonitor,
    pub towing: TowingMonitor,
    pub eco: EcoMonitor,
    pub link: Link,
    pub audit: Vec<AuditEntry>,
}

impl TrackerState {
    pub fn new(config: &TrackerConfig) -> Self {
        TrackerState {
            power_mode: PowerMode::Active,
            battery_uas: BATTERY_CAPACITY_UAS,
            last_tick_ms: None,
            last_fix: None,
            last_sent_fix: None,
            last_record_time_ms: None,
            odometer_m: 0.0,
            zone_membership: BTreeSet::new(),
            buffer: RecordBuffer::new(config.buffer_capacity_bytes),
            outputs: 0,
            seq: 1,
            authorized: true,
            driver_key: None,
            last_activity_ms: None,
            stationary_since_ms: None,
            inputs: InputLatch::default(),
            overspeed: OverspeedMonitor::default(),
            towing: TowingMonitor::default(),
            eco: EcoMonitor::default(),
            link: Link::default(),
            audit: Vec::new(),
        }
    }

    pub fn battery_mah(&self) -> f64 {
        self.battery_uas as f64 / 3_600_000.0
    }

    /// Out of charge with no external supply: the device does nothing until power returns.
    pub fn is_dead(&self) -> bool {
        self.battery_uas == 0 && self.inputs.external_power != Some(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    config: TrackerConfig,
    state: TrackerState,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        let state = TrackerState::new(&config);
        Tracker { config, state }
    }

    pub fn with_state(config: TrackerConfig, state: TrackerState) -> Self {
        Tracker { config, state }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrackerState {
        &mut self.state
    }

    fn modem_ok(&self, frame: &SensorFrame) -> bool {
        frame.gsm_available
            && !frame.gsm_jammed
            && self.state.power_mode.modem_on()
            && !self.state.is_dead()
    }

    /// Advance one tick.
    pub fn step(&mut self, frame: &SensorFrame) -> Result<StepOutput, TrackerError> {
        let now = frame.tick_time_ms;
        let dt = match self.state.last_tick_ms {
            Some(previous) if now <= previous => {
                return Err(TrackerError::ClockRegression { previous, now });
            }
            Some(previous) => now - previous,
            None => 0,
        };
        self.state.last_tick_ms = Some(now);

        let mut codes = power::power_tick(&mut self.state, frame, &self.config, dt);
        if self.state.is_dead() {
            self.state.link.service(&mut self.state.buffer, &self.config, now, false);
            return Ok(StepOutput::default());
        }

        let fix = if self.state.power_mode.gps_on() {
            fuse_lines(&frame.nmea_lines).ok().filter(|f| f.valid)
        } else {
            None
        };

        let mut zone_codes = Vec::new();
        if let Some(fix) = &fix {
            let prev = self.state.last_fix.map(|(_, f)| f);
            if let Some(prev) = prev.filter(|_| fix.speed_kmh >= MOVING_SPEED_KMH) {
                self.state.odometer_m += haversine_distance(prev.position(), fix.position());
            }
            let here = fix.position();
            match zone_transitions(prev.map(|p| p.position()), here, &self.config.zones) {
                Ok(transitions) => {
                    zone_codes = transitions
                        .iter()
                        .map(|t| match t.transition {
                            Transition::Enter => (EventCode::GeofenceEnter, t.zone_id),
                            Transition::Exit => (EventCode::GeofenceExit, t.zone_id),
                        })
                        .collect();
                }
                Err(e) => warn!("geofence evaluation skipped: {e}"),
            }
            self.state.zone_membership = self
                .config
                .zones
                .iter()
                .filter(|z| z.contains(here))
                .map(|z| z.id())
                .collect();
        }

        codes.extend(events::detect_events(&mut self.state, frame, fix.as_ref(), &self.config));
        if let Some(fix) = fix {
            self.state.last_fix = Some((now, fix));
        }

        let mut tagged: Vec<(EventCode, u16)> = codes.into_iter().map(|c| (c, 0)).collect();
        tagged.extend(zone_codes);
        if tagged.is_empty() {
            if let Some(fix) = &fix {
                if let Some(trigger) = evaluate_acquisition(&self.state, fix, &self.config, now) {
                    tagged.push((trigger.into(), 0));
                }
            }
        }

        let mut out = StepOutput::default();
        for (code, zone) in tagged {
            let record = self.build_record(frame, fix.as_ref(), code, zone);
            self.state.buffer.push(&record);
            if record.is_priority() {
                self.state.link.request_flush();
            }
            if code == EventCode::Panic {
                out.outbound.extend(self.panic_sms(frame, &record));
            }
            debug!("record seq={} event={}", record.seq, code);
            out.records.push(record);
        }

        let modem_ok = self.modem_ok(frame);
        let packets = self.state.link.service(&mut self.state.buffer, &self.config, now, modem_ok);
        out.outbound.extend(packets.into_iter().map(Outbound::Packet));
        Ok(out)
    }

    fn panic_sms(&self, frame: &SensorFrame, record: &TelemetryRecord) -> Option<Outbound> {
        let number = self.config.alert_number.as_ref()?;
        if !frame.gsm_available || frame.gsm_jammed {
            return None;
        }
        let body = position_report(self.config.imei, record).to_string();
        SmsMessage::new(number.clone(), body).ok().map(Outbound::Sms)
    }

    fn build_record(
        &mut self,
        frame: &SensorFrame,
        fix: Option<&Fix>,
        code: EventCode,
        zone: u16,
    ) -> TelemetryRecord {
        let now = frame.tick_time_ms;
        let position = fix.copied().or(self.state.last_fix.map(|(_, f)| f));
        let mut v = RecordValues {
            timestamp_ms: now,
            fix_valid: fix.is_some(),
            event: Some(code),
            digital_in: (frame.digital_in & 0x0f) | if frame.ignition { DIN_IGNITION } else { 0 },
            digital_out: self.state.outputs,
            analog_mv: frame.analog_mv,
            fuel_level_pct: frame.fuel_level_pct.clamp(0.0, 100.0),
            fuel_rate_lh: frame.fuel_rate_lh.clamp(0.0, 6_553.5),
            odometer_m: frame
                .can_odometer_m
                .unwrap_or(self.state.odometer_m)
                .clamp(0.0, f64::from(u32::MAX)),
            battery_mv: power::battery_mv(self.state.battery_uas),
            accel_mg: frame.accel_mg,
            geofence_id: if zone != 0 {
                zone
            } else {
                self.state.zone_membership.first().copied().unwrap_or(0)
            },
            seq: self.state.seq,
            ..RecordValues::default()
        };
        if let Some(p) = position {
            v.lat = p.lat;
            v.lon = p.lon;
            v.altitude_m = p.altitude_m.clamp(f64::from(i16::MIN), f64::from(i16::MAX));
            v.heading_deg = p.heading_deg.rem_euclid(360.0);
            v.satellites = p.satellites;
            v.hdop = p.hdop;
            if fix.is_some() {
                v.speed_kmh = p.speed_kmh.clamp(0.0, 6_553.5);
            }
        }
        if v.heading_deg >= 359.95 {
            v.heading_deg = 0.0;
        }
        let record = TelemetryRecord::from_values(&v).expect("record values are clamped into range");
        self.state.seq = self.state.seq.wrapping_add(1);
        self.state.last_record_time_ms = Some(now);
        if let Some(fix) = fix {
            self.state.last_sent_fix = Some(*fix);
        }
        record
    }

    /// Handle a message from the server. Returns what to send back.
    pub fn on_downlink(&mut self, message: Downlink, now_ms: u64) -> Vec<Outbound> {
        match message {
            Downlink::Ack(ack) => {
                self.state.link.on_ack(ack, &mut self.state.buffer, now_ms);
                Vec::new()
            }
            Downlink::Command(TextMessage { id, text }) => {
                let reply = match text.parse::<Command>() {
                    Ok(cmd) => match self.handle_command(&cmd, &CommandOrigin::Session, now_ms) {
                        Ok(reply) => reply,
                        Err(e) => format!("ERR {e}"),
                    },
                    Err(e) => {
                        self.audit(now_ms, CommandOrigin::Session, &text, Err(CommandRejected::BadValue(e.to_string())));
                        format!("ERR {e}")
                    }
                };
                let reply = truncate_ascii(reply);
                match Uplink::CommandReply(TextMessage { id, text: reply }).encode() {
                    Ok(bytes) => vec![Outbound::Packet(bytes)],
                    Err(e) => {
                        warn!("cannot encode command reply: {e}");
                        Vec::new()
                    }
                }
            }
        }
    }

    /// Handle an incoming SMS. Unauthorized senders get no reply.
    pub fn on_sms(&mut self, sms: &SmsMessage, now_ms: u64) -> Vec<Outbound> {
        let origin = CommandOrigin::Sms(sms.number.clone());
        let reply = match sms.body.parse::<Command>() {
            Ok(cmd) => match self.handle_command(&cmd, &origin, now_ms) {
                Ok(reply) => reply,
                Err(CommandRejected::Unauthorized) => return Vec::new(),
                Err(e) => format!("ERR {e}"),
            },
            Err(e) => {
                if !self.sender_authorized(&sms.number) {
                    self.audit(now_ms, origin, &sms.body, Err(CommandRejected::Unauthorized));
                    return Vec::new();
                }
                self.audit(now_ms, origin, &sms.body, Err(CommandRejected::BadValue(e.to_string())));
                format!("ERR {e}")
            }
        };
        SmsMessage::new(sms.number.clone(), truncate_ascii(reply))
            .map(|m| vec![Outbound::Sms(m)])
            .unwrap_or_default()
    }

    fn sender_authorized(&self, number: &str) -> bool {
        self.config.authorized_numbers.iter().any(|n| n == number)
    }

    fn audit(&mut self, time_ms: u64, origin: CommandOrigin, text: &str, outcome: Result<String, CommandRejected>) {
        self.state.audit.push(AuditEntry {
            time_ms,
            origin,
            text: text.to_string(),
            outcome,
        });
    }

    /// Execute a remote command. Every attempt, accepted or not, lands in the audit log.
    pub fn handle_command(
        &mut self,
        command: &Command,
        origin: &CommandOrigin,
        now_ms: u64,
    ) -> Result<String, CommandRejected> {
        let outcome = match origin {
            CommandOrigin::Sms(number) if !self.sender_authorized(number) => {
                warn!("ignoring '{command}' from unauthorized number {number}");
                Err(CommandRejected::Unauthorized)
            }
            _ => self.execute(command),
        };
        if outcome.is_ok() {
            info!("command '{command}' executed");
        }
        self.audit(now_ms, origin.clone(), &command.to_string(), outcome.clone());
        outcome
    }

    fn execute(&mut self, command: &Command) -> Result<String, CommandRejected> {
        match command {
            Command::GetGps => {
                let (tick, fix) = self.state.last_fix.ok_or(CommandRejected::NoFix)?;
                let report = PositionReport {
                    imei: self.config.imei,
                    timestamp_ms: tick,
                    lat: fix.lat,
                    lon: fix.lon,
                    speed_kmh: fix.speed_kmh,
                    heading_deg: fix.heading_deg.round() as u16 % 360,
                    event: EventCode::Periodic,
                };
                Ok(report.to_string())
            }
            Command::SetParam { key, value } => {
                self.config.set_param(key, value).map_err(|e| match e {
                    ConfigError::UnknownParam(k) => CommandRejected::UnknownParam(k),
                    _ => CommandRejected::BadValue(key.clone()),
                })?;
                Ok(format!("OK {key}={value}"))
            }
            Command::Out { line, on } => {
                let bit = 1u8 << line;
                if *on {
                    self.state.outputs |= bit;
                } else {
                    self.state.outputs &= !bit;
                }
                Ok(format!("OK OUT {line} {}", u8::from(*on)))
            }
        }
    }
}

fn truncate_ascii(mut text: String) -> String {
    text.retain(|c| c.is_ascii());
    text.truncate(crate::wire::SMS_MAX_LEN);
    text
}

/// SMS position text for a record.
pub fn position_report(imei: crate::wire::Imei, record: &TelemetryRecord) -> PositionReport {
    PositionReport {
        imei,
        timestamp_ms: record.timestamp_ms,
        lat: record.lat(),
        lon: record.lon(),
        speed_kmh: record.speed_kmh(),
        heading_deg: (record.heading_deg().round() as u16) % 360,
        event: record.event_code(),
    }
}
