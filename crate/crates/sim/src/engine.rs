//! Round-robin scenario runner.
//!
//! Every tick: deliver the network messages that are due, issue scheduled commands, then step
//! each vehicle's trace and tracker in order. All parties read the same `ManualClock`, so a
//! run is a pure function of the scenario and its seed.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use log::{debug, info, warn};
use radfleet_core::geo::haversine_distance;
use radfleet_core::tracker::{Outbound, Session, Tracker, TrackerConfig, Transport};
use radfleet_core::wire::{Downlink, SmsMessage, StreamDecoder, TelemetryRecord, Uplink};
use radfleet_server::{
    handle_datagram, CommandStatus, Connection, DeviceSeed, FleetServer, ManualClock, OpenMode, ServerConfig,
};

use crate::network::NetworkModel;
use crate::report::{ScenarioReport, VehicleReport, Violation};
use crate::scenario::Scenario;
use crate::trace::{RouteSim, Sample};
use crate::SimError;

/// Number the server's SMS gateway sends from; trackers accept commands from it.
pub const SERVER_NUMBER: &str = "+15550000100";
/// Number panic SMS go to.
pub const ALERT_NUMBER: &str = "+15550000911";

/// Longest the engine keeps ticking past the scenario end while buffers drain.
const DRAIN_LIMIT_MS: u64 = 3_600_000;
/// Relative tolerance of the speed vs position-derivative check.
const SPEED_TOLERANCE: f64 = 0.02;

pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub server: Arc<FleetServer>,
    pub clock: Arc<ManualClock>,
}

#[derive(Debug)]
enum Delivery {
    Uplink { epoch: u64, bytes: Vec<u8> },
    Downlink { epoch: u64, bytes: Vec<u8> },
    SmsToDevice { text: String },
    SmsToServer { body: String },
}

struct Vehicle {
    label: String,
    sim: RouteSim,
    tracker: Tracker,
    transport: Transport,
    conn: Option<Connection>,
    /// Bumped whenever the GPRS connection is torn down; messages of older epochs are lost.
    epoch: u64,
    downlink: StreamDecoder<Downlink>,
    /// TCP delivers in order, so each direction's arrival times never go backwards.
    up_ready_ms: u64,
    down_ready_ms: u64,
    last_sample: Sample,
    produced: Vec<u32>,
    max_buffer_bytes: usize,
    alerts: u64,
    alerts_seen: HashSet<u32>,
    max_alert_latency_ms: Option<u64>,
    sms_alerts: u64,
    speed_violations: u64,
    worst_speed: Option<(u64, f64, f64)>,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    server: Arc<FleetServer>,
    clock: Arc<ManualClock>,
    network: NetworkModel,
    vehicles: Vec<Vehicle>,
    queue: BTreeMap<(u64, u64), (usize, Delivery)>,
    counter: u64,
    next_command: usize,
    now: u64,
}

/// Runs `scenario` against a fresh server whose store lives in `data_dir`.
pub fn run_scenario(scenario: &Scenario, data_dir: &Path) -> Result<ScenarioRun, SimError> {
    scenario.validate()?;
    let clock = Arc::new(ManualClock::new(scenario.start_ms));
    let config = server_config(scenario, data_dir);
    let server = FleetServer::open(config, clock.clone(), OpenMode::ReadWrite)
        .map_err(|e| SimError::ServerUnreachable(e.to_string()))?;

    let mut vehicles = Vec::with_capacity(scenario.vehicles.len());
    for (i, spec) in scenario.vehicles.iter().enumerate() {
        let mut cfg = TrackerConfig::new(spec.imei);
        cfg.speed_limit_kmh = spec.speed_limit_kmh;
        cfg.transport = spec.transport;
        cfg.authorized_numbers = vec![SERVER_NUMBER.to_string()];
        cfg.alert_number = Some(ALERT_NUMBER.to_string());
        for z in &scenario.zones {
            let zone = z.build().map_err(|e| SimError::BadScenario(format!("zone: {e}")))?;
            cfg.add_zone(zone).map_err(|e| SimError::BadScenario(format!("zone: {e}")))?;
        }
        let sim = RouteSim::new(spec.route.clone(), scenario.tick_ms, scenario.seed, i as u64);
        vehicles.push(Vehicle {
            label: spec.label.clone(),
            last_sample: sim.initial(),
            sim,
            tracker: Tracker::new(cfg),
            transport: spec.transport,
            conn: None,
            epoch: 0,
            downlink: StreamDecoder::downlink(),
            up_ready_ms: 0,
            down_ready_ms: 0,
            produced: Vec::new(),
            max_buffer_bytes: 0,
            alerts: 0,
            alerts_seen: HashSet::new(),
            max_alert_latency_ms: None,
            sms_alerts: 0,
            speed_violations: 0,
            worst_speed: None,
        });
    }

    let mut engine = Engine {
        scenario,
        network: scenario.network.model(scenario.seed)?,
        server,
        clock,
        vehicles,
        queue: BTreeMap::new(),
        counter: 0,
        next_command: 0,
        now: scenario.start_ms,
    };
    info!(
        "scenario '{}': {} vehicles, {} h",
        scenario.name,
        scenario.vehicles.len(),
        scenario.duration_ms as f64 / 3_600_000.0
    );
    let mut ticks = 0u64;
    while engine.now < scenario.end_ms() {
        engine.tick()?;
        ticks += 1;
    }
    let drain_until = engine.now + DRAIN_LIMIT_MS;
    while !engine.settled() && engine.now < drain_until {
        engine.tick()?;
        ticks += 1;
    }
    let report = engine.finish(ticks);
    Ok(ScenarioRun {
        report,
        server: engine.server,
        clock: engine.clock,
    })
}

fn server_config(scenario: &Scenario, data_dir: &Path) -> ServerConfig {
    ServerConfig {
        data_dir: data_dir.to_path_buf(),
        sms_simulation: true,
        utc_offset_minutes: scenario.utc_offset_minutes,
        fsync: false,
        zones: scenario.zones.clone(),
        devices: scenario
            .vehicles
            .iter()
            .map(|v| DeviceSeed {
                imei: v.imei.to_string(),
                label: v.label.clone(),
                class: v.class.clone(),
                tank_capacity_l: Some(v.route.fuel.tank_l),
                speed_limit_kmh: Some(v.speed_limit_kmh),
                enabled: true,
            })
            .collect(),
        ..ServerConfig::default()
    }
}

fn is_login(bytes: &[u8]) -> bool {
    matches!(Uplink::decode(bytes), Ok((Uplink::Frame(f), _)) if f.is_login())
}

impl Engine<'_> {
    fn schedule(&mut self, at_ms: u64, vehicle: usize, d: Delivery) {
        self.counter += 1;
        self.queue.insert((at_ms, self.counter), (vehicle, d));
    }

    fn has_coverage(&self, v: usize, t: u64) -> bool {
        self.network.has_coverage(v, t)
    }

    /// Nothing buffered, in flight or queued anywhere.
    fn settled(&self) -> bool {
        self.queue.is_empty()
            && self.vehicles.iter().all(|v| {
                let st = v.tracker.state();
                st.buffer.is_empty() && !st.link.frame_in_flight()
            })
    }

    fn tick(&mut self) -> Result<(), SimError> {
        self.now += self.scenario.tick_ms;
        self.clock.set(self.now);

        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let ((at, _), (v, d)) = entry.remove_entry();
            self.deliver(v, at, d);
        }

        while let Some(c) = self.scenario.commands.get(self.next_command) {
            if c.at_ms > self.now {
                break;
            }
            self.next_command += 1;
            match self.server.send_command(&c.vehicle, &c.command) {
                Ok(rec) => debug!("command {} '{}' for {} via {:?}", rec.id, rec.text, c.vehicle, rec.channel),
                Err(e) => warn!("command for {} not sent: {e}", c.vehicle),
            }
        }

        for v in 0..self.vehicles.len() {
            self.step_vehicle(v)?;
        }

        // Server to device traffic produced during this tick.
        for sms in self.server.take_sms_outbox() {
            let Some(v) = self.vehicles.iter().position(|x| x.tracker.config().imei == sms.imei) else {
                continue;
            };
            let at = self.network.coverage_returns_at(v, self.now).unwrap_or(self.now) + self.network.sms_latency_ms;
            self.schedule(at, v, Delivery::SmsToDevice { text: sms.text });
        }
        for v in 0..self.vehicles.len() {
            let Some(conn) = self.vehicles[v].conn.as_mut() else {
                continue;
            };
            let bytes = conn.poll_commands();
            if !bytes.is_empty() {
                self.send_down(v, bytes);
            }
        }
        Ok(())
    }

    fn step_vehicle(&mut self, v: usize) -> Result<(), SimError> {
        let now = self.now;
        let coverage = self.has_coverage(v, now);
        let veh = &mut self.vehicles[v];
        let (sample, mut frame) = veh.sim.next_frame();
        check_speed(veh, &sample);
        frame.gsm_available = coverage;
        if !coverage || frame.gsm_jammed {
            drop_connection(veh);
        }
        let out = veh.tracker.step(&frame)?;
        for r in &out.records {
            veh.produced.push(r.seq);
            if r.is_priority() {
                veh.alerts += 1;
            }
        }
        let st = veh.tracker.state();
        veh.max_buffer_bytes = veh.max_buffer_bytes.max(st.buffer.occupancy_bytes());
        if *st.link.session() == Session::Offline {
            drop_connection(veh);
        }
        self.send_outbound(v, out.outbound);
        Ok(())
    }

    fn send_outbound(&mut self, v: usize, outbound: Vec<Outbound>) {
        for o in outbound {
            match o {
                Outbound::Packet(bytes) => self.send_up(v, bytes),
                Outbound::Sms(sms) if sms.number == SERVER_NUMBER => {
                    if let Some(at) = self.sms_time(v) {
                        self.schedule(at, v, Delivery::SmsToServer { body: sms.body });
                    }
                }
                Outbound::Sms(sms) => {
                    debug!("{}: SMS to {}: {}", self.vehicles[v].label, sms.number, sms.body);
                    self.vehicles[v].sms_alerts += 1;
                }
            }
        }
    }

    /// SMS from the device only leave while it has coverage.
    fn sms_time(&self, v: usize) -> Option<u64> {
        self.has_coverage(v, self.now).then_some(self.now + self.network.sms_latency_ms)
    }

    fn send_up(&mut self, v: usize, bytes: Vec<u8>) {
        let now = self.now;
        let latency = self.network.latency();
        let veh = &mut self.vehicles[v];
        let at = match veh.transport {
            Transport::Tcp => {
                if is_login(&bytes) {
                    // A login opens a fresh connection.
                    drop_connection(veh);
                }
                veh.up_ready_ms = veh.up_ready_ms.max(now + latency);
                veh.up_ready_ms
            }
            Transport::Udp => {
                if self.network.drops_datagram() {
                    return;
                }
                now + latency
            }
        };
        let epoch = self.vehicles[v].epoch;
        self.schedule(at, v, Delivery::Uplink { epoch, bytes });
    }

    fn send_down(&mut self, v: usize, bytes: Vec<u8>) {
        let now = self.now;
        let latency = self.network.latency();
        let veh = &mut self.vehicles[v];
        let at = match veh.transport {
            Transport::Tcp => {
                veh.down_ready_ms = veh.down_ready_ms.max(now + latency);
                veh.down_ready_ms
            }
            Transport::Udp => {
                if self.network.drops_datagram() {
                    return;
                }
                now + latency
            }
        };
        let epoch = self.vehicles[v].epoch;
        self.schedule(at, v, Delivery::Downlink { epoch, bytes });
    }

    fn deliver(&mut self, v: usize, at: u64, d: Delivery) {
        match d {
            Delivery::Uplink { epoch, bytes } => {
                if epoch != self.vehicles[v].epoch || !self.has_coverage(v, at) {
                    return;
                }
                self.note_alerts(v, at, &bytes);
                let reply = match self.vehicles[v].transport {
                    Transport::Tcp => {
                        let server = self.server.clone();
                        let veh = &mut self.vehicles[v];
                        let conn = veh
                            .conn
                            .get_or_insert_with(|| Connection::new(server, radfleet_server::Transport::Tcp));
                        let reply = conn.on_bytes(&bytes);
                        if conn.is_closed() {
                            veh.conn = None;
                        }
                        reply
                    }
                    Transport::Udp => handle_datagram(&self.server, &bytes).unwrap_or_default(),
                };
                if !reply.is_empty() {
                    self.send_down(v, reply);
                }
            }
            Delivery::Downlink { epoch, bytes } => {
                if epoch != self.vehicles[v].epoch || !self.has_coverage(v, at) {
                    return;
                }
                let veh = &mut self.vehicles[v];
                let messages: Vec<Downlink> = match veh.transport {
                    Transport::Tcp => {
                        veh.downlink.push(&bytes);
                        std::iter::from_fn(|| veh.downlink.next_message())
                            .filter_map(|m| m.map_err(|e| debug!("corrupt downlink: {e}")).ok())
                            .collect()
                    }
                    Transport::Udp => Downlink::decode(&bytes).map(|(m, _)| m).into_iter().collect(),
                };
                for m in messages {
                    let out = self.vehicles[v].tracker.on_downlink(m, at);
                    self.send_outbound(v, out);
                }
            }
            Delivery::SmsToDevice { text } => {
                if !self.has_coverage(v, at) {
                    // Held by the network until the device is reachable again.
                    let back = self.network.coverage_returns_at(v, at).unwrap_or(at);
                    self.schedule(back, v, Delivery::SmsToDevice { text });
                    return;
                }
                let Ok(sms) = SmsMessage::new(SERVER_NUMBER, text) else {
                    return;
                };
                let out = self.vehicles[v].tracker.on_sms(&sms, at);
                self.send_outbound(v, out);
            }
            Delivery::SmsToServer { body } => {
                let imei = self.vehicles[v].tracker.config().imei;
                self.server.on_sms(imei, &body);
            }
        }
    }

    /// First arrival of each priority record at the server.
    fn note_alerts(&mut self, v: usize, at: u64, bytes: &[u8]) {
        let Ok((Uplink::Frame(frame), _)) = Uplink::decode(bytes) else {
            return;
        };
        let veh = &mut self.vehicles[v];
        for r in frame.records.iter().filter(|r| r.is_priority()) {
            if veh.alerts_seen.insert(r.seq) {
                let latency = at.saturating_sub(r.timestamp_ms);
                veh.max_alert_latency_ms = Some(veh.max_alert_latency_ms.map_or(latency, |m| m.max(latency)));
            }
        }
    }

    fn finish(&self, ticks: u64) -> ScenarioReport {
        let mut violations = Vec::new();
        let stats = self.server.stats();
        let commands = self.server.commands();
        let mut rows = Vec::new();
        for veh in &self.vehicles {
            let imei = veh.tracker.config().imei;
            let stored = self.server.stored(imei);
            let st = veh.tracker.state();
            let buffered: Vec<TelemetryRecord> = st.buffer.records();
            let stored_seqs: Vec<u32> = stored.iter().map(|p| p.record.seq).collect();
            let stored_set: HashSet<u32> = stored_seqs.iter().copied().collect();
            let buffered_set: HashSet<u32> = buffered.iter().map(|r| r.seq).collect();
            let produced_set: HashSet<u32> = veh.produced.iter().copied().collect();

            let missing = veh
                .produced
                .iter()
                .filter(|s| !stored_set.contains(s) && !buffered_set.contains(s))
                .count() as u64;
            if missing > st.buffer.evicted() {
                violations.push(Violation::new(
                    "no-loss",
                    format!(
                        "{}: {missing} produced records neither stored nor buffered ({} evicted)",
                        veh.label,
                        st.buffer.evicted()
                    ),
                ));
            }
            if let Some(s) = stored_seqs.iter().find(|s| !produced_set.contains(s)) {
                violations.push(Violation::new("no-phantoms", format!("{}: stored seq {s} was never produced", veh.label)));
            }
            if let Some(w) = stored_seqs.windows(2).find(|w| w[1] <= w[0]) {
                violations.push(Violation::new(
                    "seq-order",
                    format!("{}: seq {} stored after seq {}", veh.label, w[1], w[0]),
                ));
            }
            if self.scenario.expect_all_delivered && stored_set.len() != produced_set.len() {
                violations.push(Violation::new(
                    "all-delivered",
                    format!("{}: stored {} of {} produced records", veh.label, stored_set.len(), produced_set.len()),
                ));
            }
            if veh.max_buffer_bytes >= st.buffer.capacity_bytes() {
                violations.push(Violation::new(
                    "buffer-peak",
                    format!("{}: buffer reached {} bytes", veh.label, veh.max_buffer_bytes),
                ));
            }
            if let Some((t, v, fd)) = veh.worst_speed {
                violations.push(Violation::new(
                    "physical-sanity",
                    format!(
                        "{}: {} ticks off, worst at {t}: speed {v:.3} km/h vs position derivative {fd:.3} km/h",
                        veh.label, veh.speed_violations
                    ),
                ));
            }
            let key = imei.to_string();
            rows.push(VehicleReport {
                vehicle: veh.label.clone(),
                imei: key.clone(),
                produced: veh.produced.len() as u64,
                stored: stored.len() as u64,
                buffered: buffered.len() as u64,
                evicted: st.buffer.evicted(),
                max_buffer_bytes: veh.max_buffer_bytes as u64,
                alerts: veh.alerts,
                max_alert_latency_s: veh.max_alert_latency_ms.map(|ms| ms as f64 / 1000.0),
                sms_alerts: veh.sms_alerts,
                commands_sent: commands.iter().filter(|c| c.imei == key).count() as u64,
                commands_acked: commands
                    .iter()
                    .filter(|c| c.imei == key && c.status == CommandStatus::Acked)
                    .count() as u64,
            });
        }
        if stats.tamper > 0 {
            violations.push(Violation::new("no-tamper", format!("{} tampered resends", stats.tamper)));
        }
        ScenarioReport {
            name: self.scenario.name.clone(),
            seed: self.scenario.seed,
            start_ms: self.scenario.start_ms,
            end_ms: self.now,
            ticks,
            frames: stats.frames,
            duplicates: stats.duplicates,
            vehicles: rows,
            violations,
        }
    }
}

fn drop_connection(veh: &mut Vehicle) {
    veh.conn = None;
    veh.epoch += 1;
    veh.downlink = StreamDecoder::downlink();
}

/// Mean speed over the tick against the great-circle distance between consecutive positions.
fn check_speed(veh: &mut Vehicle, s: &Sample) {
    let prev = std::mem::replace(&mut veh.last_sample, *s);
    let dt_h = (s.t_ms - prev.t_ms) as f64 / 3_600_000.0;
    if dt_h <= 0.0 {
        return;
    }
    let fd = haversine_distance(prev.position, s.position) / 1000.0 / dt_h;
    if (fd - s.speed_kmh).abs() > SPEED_TOLERANCE * s.speed_kmh.max(fd) + 1e-3 {
        veh.speed_violations += 1;
        if veh.worst_speed.is_none_or(|(_, v, f)| (f - v).abs() < (fd - s.speed_kmh).abs()) {
            veh.worst_speed = Some((s.t_ms, s.speed_kmh, fd));
        }
    }
}
