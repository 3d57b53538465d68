//! Scenario definitions and their TOML file format.
//!
//! Times in the file are hours after `start`; `daily.depart_h` is an hour of the local day.

use std::path::Path;

use chrono::DateTime;
use radfleet_core::geo::{destination_point, GeoPoint};
use radfleet_core::tracker::Transport;
use radfleet_core::wire::{Command, Imei};
use radfleet_server::ZoneDef;
use serde::Deserialize;

use crate::network::{NetworkModel, Outage};
use crate::route::{FuelModel, Injection, RouteScript, Waypoint};
use crate::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub label: String,
    pub imei: Imei,
    pub class: Option<String>,
    pub transport: Transport,
    pub speed_limit_kmh: f64,
    pub route: RouteScript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandInjection {
    pub at_ms: u64,
    pub vehicle: String,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub outages: Vec<Outage>,
    pub latency_ms: (u64, u64),
    pub drop_probability: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            outages: Vec::new(),
            latency_ms: (50, 300),
            drop_probability: 0.0,
        }
    }
}

impl NetworkSpec {
    pub fn model(&self, seed: u64) -> Result<NetworkModel, SimError> {
        NetworkModel::new(self.outages.clone(), self.latency_ms, self.drop_probability, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub start_ms: u64,
    pub duration_ms: u64,
    pub tick_ms: u64,
    pub seed: u64,
    pub utc_offset_minutes: i32,
    pub vehicles: Vec<VehicleSpec>,
    pub network: NetworkSpec,
    pub zones: Vec<ZoneDef>,
    pub commands: Vec<CommandInjection>,
    /// Fail the run unless every produced record reached the server by the end.
    pub expect_all_delivered: bool,
}

impl Scenario {
    pub fn new(name: &str, start_ms: u64, duration_ms: u64) -> Self {
        Scenario {
            name: name.to_string(),
            start_ms,
            duration_ms,
            tick_ms: 1000,
            seed: 0,
            utc_offset_minutes: 210,
            vehicles: Vec::new(),
            network: NetworkSpec::default(),
            zones: Vec::new(),
            commands: Vec::new(),
            expect_all_delivered: true,
        }
    }

    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::BadScenario(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| SimError::BadScenario(e.to_string()))?;
        file.build()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadScenario(m));
        if self.tick_ms == 0 {
            return bad("tick must be positive".into());
        }
        if self.vehicles.is_empty() {
            return bad("no vehicles".into());
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            v.route.validate().map_err(|e| SimError::BadScenario(format!("vehicle {}: {e}", v.label)))?;
            if self.vehicles[..i].iter().any(|o| o.label == v.label || o.imei == v.imei) {
                return bad(format!("vehicle {} is listed twice", v.label));
            }
        }
        for c in &self.commands {
            if !self.vehicles.iter().any(|v| v.label == c.vehicle) {
                return bad(format!("command for unknown vehicle {}", c.vehicle));
            }
        }
        if self.commands.windows(2).any(|w| w[1].at_ms < w[0].at_ms) {
            return bad("commands must be in time order".into());
        }
        self.network.model(self.seed).map(|_| ())
    }
}

// File format

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    start: String,
    duration_h: f64,
    #[serde(default = "one")]
    tick_s: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "yes")]
    expect_all_delivered: bool,
    #[serde(default = "default_offset")]
    utc_offset_minutes: i32,
    #[serde(default)]
    network: NetworkFile,
    #[serde(default)]
    zones: Vec<ZoneDef>,
    vehicles: Vec<VehicleFile>,
    #[serde(default)]
    commands: Vec<CommandFile>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_offset() -> i32 {
    210
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default = "default_latency")]
    latency_ms: [u64; 2],
    #[serde(default)]
    drop_probability: f64,
    #[serde(default)]
    outages: Vec<OutageFile>,
}

impl Default for NetworkFile {
    fn default() -> Self {
        NetworkFile {
            latency_ms: default_latency(),
            drop_probability: 0.0,
            outages: Vec::new(),
        }
    }
}

fn default_latency() -> [u64; 2] {
    [50, 300]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutageFile {
    from_h: f64,
    to_h: f64,
    #[serde(default)]
    vehicles: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuelFile {
    #[serde(default = "idle_rate")]
    idle_rate_lh: f64,
    #[serde(default = "per_km")]
    per_km_l: f64,
    #[serde(default = "tank")]
    tank_l: f64,
}

fn idle_rate() -> f64 {
    FuelModel::default().idle_rate_lh
}

fn per_km() -> f64 {
    FuelModel::default().per_km_l
}

fn tank() -> f64 {
    FuelModel::default().tank_l
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    lat: f64,
    lon: f64,
    speed_kmh: f64,
    #[serde(default)]
    dwell_min: f64,
    #[serde(default)]
    engine_on: bool,
    #[serde(default)]
    depart_h: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DailyFile {
    km: Vec<f64>,
    depart_h: f64,
    speed_kmh: f64,
    #[serde(default)]
    bearing_deg: f64,
    #[serde(default = "lunch")]
    lunch_min: f64,
}

fn lunch() -> f64 {
    30.0
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EventFile {
    Panic { at_h: f64 },
    Jamming { from_h: f64, to_h: f64 },
    Key { at_h: f64, key: u64 },
    PowerCut { from_h: f64, to_h: f64 },
    Input { at_h: f64, line: u8, on: bool },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleFile {
    label: String,
    imei: String,
    #[serde(default)]
    class: Option<String>,
    #[serde(default = "tcp")]
    transport: String,
    #[serde(default = "speed_limit")]
    speed_limit_kmh: f64,
    origin: [f64; 2],
    #[serde(default = "altitude")]
    altitude_m: f64,
    #[serde(default)]
    odometer_km: f64,
    #[serde(default)]
    fuel: Option<FuelFile>,
    #[serde(default)]
    waypoints: Vec<WaypointFile>,
    #[serde(default)]
    daily: Option<DailyFile>,
    #[serde(default)]
    events: Vec<EventFile>,
    /// Replicate this vehicle: labels get a `-NN` suffix, IMEIs count up and each copy is
    /// shifted 500 m north of the previous one.
    #[serde(default)]
    count: Option<usize>,
}

fn tcp() -> String {
    "tcp".into()
}

fn speed_limit() -> f64 {
    90.0
}

fn altitude() -> f64 {
    1200.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandFile {
    at_h: f64,
    vehicle: String,
    command: String,
}

fn hours(start_ms: u64, h: f64) -> Result<u64, SimError> {
    if !(h.is_finite() && h >= 0.0) {
        return Err(SimError::BadScenario(format!("time {h} h must be >= 0")));
    }
    Ok(start_ms + (h * 3_600_000.0).round() as u64)
}

fn point(lat: f64, lon: f64) -> Result<GeoPoint, SimError> {
    GeoPoint::new(lat, lon).map_err(|e| SimError::BadScenario(e.to_string()))
}

fn shifted(p: GeoPoint, copy: usize) -> GeoPoint {
    if copy == 0 {
        p
    } else {
        destination_point(p, 0.0, 500.0 * copy as f64)
    }
}

impl ScenarioFile {
    fn build(self) -> Result<Scenario, SimError> {
        let start = DateTime::parse_from_rfc3339(&self.start)
            .map_err(|e| SimError::BadScenario(format!("start '{}': {e}", self.start)))?;
        let start_ms = u64::try_from(start.timestamp_millis())
            .map_err(|_| SimError::BadScenario("start before 1970".into()))?;
        if !(self.tick_s > 0.0 && self.duration_h > 0.0) {
            return Err(SimError::BadScenario("tick_s and duration_h must be positive".into()));
        }
        let mut scenario = Scenario::new(&self.name, start_ms, (self.duration_h * 3_600_000.0).round() as u64);
        scenario.tick_ms = (self.tick_s * 1000.0).round() as u64;
        scenario.seed = self.seed;
        scenario.utc_offset_minutes = self.utc_offset_minutes;
        scenario.expect_all_delivered = self.expect_all_delivered;
        scenario.zones = self.zones;

        for v in self.vehicles {
            let copies = v.count.unwrap_or(1);
            let base: Imei = v.imei.parse().map_err(|_| SimError::BadScenario(format!("bad IMEI {}", v.imei)))?;
            for copy in 0..copies {
                scenario.vehicles.push(v.build(start_ms, base, copy, copies)?);
            }
        }

        let net = self.network;
        let mut outages = Vec::new();
        for o in net.outages {
            let mut vehicles = Vec::new();
            for name in &o.vehicles {
                let matched: Vec<usize> = scenario
                    .vehicles
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| &v.label == name || v.label.strip_prefix(name.as_str()).is_some_and(|s| s.starts_with('-')))
                    .map(|(i, _)| i)
                    .collect();
                if matched.is_empty() {
                    return Err(SimError::BadScenario(format!("outage names unknown vehicle {name}")));
                }
                vehicles.extend(matched);
            }
            outages.push(Outage {
                from_ms: hours(start_ms, o.from_h)?,
                to_ms: hours(start_ms, o.to_h)?,
                vehicles,
            });
        }
        scenario.network = NetworkSpec {
            outages,
            latency_ms: (net.latency_ms[0], net.latency_ms[1]),
            drop_probability: net.drop_probability,
        };

        for c in self.commands {
            scenario.commands.push(CommandInjection {
                at_ms: hours(start_ms, c.at_h)?,
                vehicle: c.vehicle,
                command: c.command.parse().map_err(|e| SimError::BadScenario(format!("command '{}': {e}", c.command)))?,
            });
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

impl VehicleFile {
    fn build(&self, start_ms: u64, base: Imei, copy: usize, copies: usize) -> Result<VehicleSpec, SimError> {
        let label = if copies > 1 { format!("{}-{:02}", self.label, copy + 1) } else { self.label.clone() };
        let imei = Imei::new(base.value() + copy as u64).map_err(|_| SimError::BadScenario(format!("IMEI range of {label}")))?;
        let transport = self
            .transport
            .parse()
            .map_err(|_| SimError::BadScenario(format!("transport '{}' is not tcp or udp", self.transport)))?;
        let origin = shifted(point(self.origin[0], self.origin[1])?, copy);
        let fuel = self.fuel.as_ref().map_or_else(FuelModel::default, |f| FuelModel {
            idle_rate_lh: f.idle_rate_lh,
            per_km_l: f.per_km_l,
            tank_l: f.tank_l,
        });

        let mut route = match &self.daily {
            Some(d) => {
                if !self.waypoints.is_empty() {
                    return Err(SimError::BadScenario(format!("{label}: use either daily or waypoints")));
                }
                RouteScript::daily_out_and_back(
                    origin,
                    start_ms,
                    hours(0, d.depart_h)?,
                    &d.km,
                    d.speed_kmh,
                    d.bearing_deg,
                    d.lunch_min * 60.0,
                )
            }
            None => {
                let mut route = RouteScript::parked(origin, start_ms);
                for w in &self.waypoints {
                    route.waypoints.push(Waypoint {
                        point: shifted(point(w.lat, w.lon)?, copy),
                        speed_kmh: w.speed_kmh,
                        dwell_s: w.dwell_min * 60.0,
                        engine_on: w.engine_on,
                        depart_at_ms: w.depart_h.map(|h| hours(start_ms, h)).transpose()?,
                    });
                }
                route
            }
        };
        route.fuel = fuel;
        route.altitude_m = self.altitude_m;
        route.initial_odometer_m = self.odometer_km * 1000.0;
        for e in &self.events {
            route.events.push(match *e {
                EventFile::Panic { at_h } => Injection::Panic { at_ms: hours(start_ms, at_h)? },
                EventFile::Jamming { from_h, to_h } => Injection::Jamming {
                    from_ms: hours(start_ms, from_h)?,
                    to_ms: hours(start_ms, to_h)?,
                },
                EventFile::Key { at_h, key } => Injection::KeySwipe {
                    at_ms: hours(start_ms, at_h)?,
                    key,
                },
                EventFile::PowerCut { from_h, to_h } => Injection::PowerCut {
                    from_ms: hours(start_ms, from_h)?,
                    to_ms: hours(start_ms, to_h)?,
                },
                EventFile::Input { at_h, line, on } => Injection::Input {
                    at_ms: hours(start_ms, at_h)?,
                    line,
                    on,
                },
            });
        }
        Ok(VehicleSpec {
            label,
            imei,
            class: self.class.clone(),
            transport,
            speed_limit_kmh: self.speed_limit_kmh,
            route,
        })
    }
}
