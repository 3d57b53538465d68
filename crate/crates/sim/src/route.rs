//! Scripted vehicle routes: legs between waypoints, dwells, fuel model and injected events.

use radfleet_core::geo::{destination_point, GeoPoint};

use crate::SimError;

/// Fuel burn while the engine runs: `idle_rate_lh + per_km_l * speed_kmh` litres per hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuelModel {
    pub idle_rate_lh: f64,
    pub per_km_l: f64,
    pub tank_l: f64,
}

impl Default for FuelModel {
    fn default() -> Self {
        FuelModel {
            idle_rate_lh: 1.0,
            per_km_l: 0.09,
            tank_l: 60.0,
        }
    }
}

impl FuelModel {
    pub fn rate_lh(&self, speed_kmh: f64) -> f64 {
        self.idle_rate_lh + self.per_km_l * speed_kmh
    }
}

/// One leg: drive from the previous stop to `point` at up to `speed_kmh`, then stay for at
/// least `dwell_s`. A leg never departs before `depart_at_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub point: GeoPoint,
    pub speed_kmh: f64,
    pub dwell_s: f64,
    /// Engine idling during the dwell that follows this leg.
    pub engine_on: bool,
    pub depart_at_ms: Option<u64>,
}

impl Waypoint {
    pub fn new(point: GeoPoint, speed_kmh: f64) -> Self {
        Waypoint {
            point,
            speed_kmh,
            dwell_s: 0.0,
            engine_on: false,
            depart_at_ms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Panic { at_ms: u64 },
    Jamming { from_ms: u64, to_ms: u64 },
    /// Driver key presented from `at_ms` on.
    KeySwipe { at_ms: u64, key: u64 },
    PowerCut { from_ms: u64, to_ms: u64 },
    Input { at_ms: u64, line: u8, on: bool },
}

impl Injection {
    pub fn start_ms(&self) -> u64 {
        match *self {
            Injection::Panic { at_ms } | Injection::KeySwipe { at_ms, .. } | Injection::Input { at_ms, .. } => at_ms,
            Injection::Jamming { from_ms, .. } | Injection::PowerCut { from_ms, .. } => from_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteScript {
    pub origin: GeoPoint,
    pub start_ms: u64,
    pub waypoints: Vec<Waypoint>,
    pub fuel: FuelModel,
    pub altitude_m: f64,
    pub initial_odometer_m: f64,
    pub events: Vec<Injection>,
}

impl RouteScript {
    pub fn parked(origin: GeoPoint, start_ms: u64) -> Self {
        RouteScript {
            origin,
            start_ms,
            waypoints: Vec::new(),
            fuel: FuelModel::default(),
            altitude_m: 1200.0,
            initial_odometer_m: 0.0,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadScenario(m));
        let mut last_depart = self.start_ms;
        for (i, w) in self.waypoints.iter().enumerate() {
            if !(w.speed_kmh.is_finite() && w.speed_kmh >= 0.0) {
                return bad(format!("waypoint {i}: speed {} must be >= 0", w.speed_kmh));
            }
            if !(w.dwell_s.is_finite() && w.dwell_s >= 0.0) {
                return bad(format!("waypoint {i}: dwell {} must be >= 0", w.dwell_s));
            }
            if let Some(t) = w.depart_at_ms {
                if t < last_depart {
                    return bad(format!("waypoint {i}: departure times must be monotone"));
                }
                last_depart = t;
            }
        }
        if self.events.windows(2).any(|w| w[1].start_ms() < w[0].start_ms()) {
            return bad("event injections must be in time order".into());
        }
        for e in &self.events {
            match *e {
                Injection::Jamming { from_ms, to_ms } | Injection::PowerCut { from_ms, to_ms } if to_ms < from_ms => {
                    return bad(format!("event window {from_ms}..{to_ms} is reversed"));
                }
                Injection::Input { line, .. } if line > 3 => return bad(format!("input line {line} out of 0..=3")),
                _ => {}
            }
        }
        let f = &self.fuel;
        if !(f.idle_rate_lh >= 0.0 && f.per_km_l >= 0.0 && f.tank_l > 0.0) {
            return bad("fuel model values must be non-negative with a positive tank".into());
        }
        Ok(())
    }

    /// Out-and-back day trips: on day `d` the vehicle leaves `origin` at `depart_offset_ms`
    /// after that day's start, drives `km[d] / 2` along `bearing_deg`, parks for `lunch_s`
    /// and drives back. Days with 0 km stay parked.
    pub fn daily_out_and_back(
        origin: GeoPoint,
        day0_ms: u64,
        depart_offset_ms: u64,
        km: &[f64],
        speed_kmh: f64,
        bearing_deg: f64,
        lunch_s: f64,
    ) -> Self {
        let mut route = RouteScript::parked(origin, day0_ms);
        for (d, &dist) in km.iter().enumerate() {
            if dist <= 0.0 {
                continue;
            }
            // Alternate directions so consecutive days cover different ground.
            let bearing = (bearing_deg + 90.0 * (d % 4) as f64) % 360.0;
            let turn = destination_point(origin, bearing, dist * 500.0);
            route.waypoints.push(Waypoint {
                dwell_s: lunch_s,
                depart_at_ms: Some(day0_ms + d as u64 * 86_400_000 + depart_offset_ms),
                ..Waypoint::new(turn, speed_kmh)
            });
            route.waypoints.push(Waypoint::new(origin, speed_kmh));
        }
        route
    }
}
