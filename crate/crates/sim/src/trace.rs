//! Kinematic trace synthesis: position, speed and sensor frames at a fixed tick.

use radfleet_core::geo::{destination_point, haversine_distance, initial_bearing, GeoPoint};
use radfleet_core::nmea::{serialize_epoch, Fix};
use radfleet_core::tracker::SensorFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::route::{Injection, RouteScript};

pub const ACCEL_MS2: f64 = 1.2;
pub const DECEL_MS2: f64 = 1.5;
/// Floor speed for the last metres of a leg so arrival happens in finite time.
const CRAWL_MS: f64 = 1.0;
const STANDARD_GRAVITY: f64 = 9.806_65;

/// Ground truth for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t_ms: u64,
    pub position: GeoPoint,
    /// Mean speed over the tick that ended at `t_ms`.
    pub speed_kmh: f64,
    pub heading_deg: f64,
    /// Finite difference of consecutive speeds.
    pub accel_ms2: f64,
    pub ignition: bool,
    pub fuel_rate_lh: f64,
    pub fuel_level_pct: f64,
    pub odometer_m: f64,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    /// Parked or idling; `None` means until the end of time.
    Dwell { until_ms: Option<u64>, engine_on: bool },
    Drive {
        from: GeoPoint,
        to: GeoPoint,
        bearing: f64,
        length_m: f64,
        travelled_m: f64,
        v_ms: f64,
        target_ms: f64,
    },
}

/// Steps a [`RouteScript`] forward one tick at a time.
#[derive(Debug, Clone)]
pub struct RouteSim {
    route: RouteScript,
    tick_ms: u64,
    next_leg: usize,
    phase: Phase,
    position: GeoPoint,
    heading_deg: f64,
    last_speed_kmh: f64,
    fuel_l: f64,
    odometer_m: f64,
    t_ms: u64,
    finished_at_ms: Option<u64>,
    rng: ChaCha8Rng,
    driver_key: Option<u64>,
    digital_in: u8,
}

impl RouteSim {
    /// `stream` separates the random streams of vehicles that share a seed.
    pub fn new(route: RouteScript, tick_ms: u64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let position = route.origin;
        let fuel_l = route.fuel.tank_l * 0.8;
        let odometer_m = route.initial_odometer_m;
        let start = route.start_ms;
        let mut sim = RouteSim {
            route,
            tick_ms: tick_ms.max(1),
            next_leg: 0,
            phase: Phase::Dwell {
                until_ms: Some(start),
                engine_on: false,
            },
            position,
            heading_deg: 0.0,
            last_speed_kmh: 0.0,
            fuel_l,
            odometer_m,
            t_ms: start,
            finished_at_ms: None,
            rng,
            driver_key: None,
            digital_in: 0,
        };
        sim.advance_phase();
        sim
    }

    pub fn route(&self) -> &RouteScript {
        &self.route
    }

    pub fn tick_ms(&self) -> u64 {
        self.tick_ms
    }

    /// Time the last leg's dwell ends, once reached.
    pub fn finished_at_ms(&self) -> Option<u64> {
        self.finished_at_ms
    }

    /// The sample at the start time, before any tick.
    pub fn initial(&self) -> Sample {
        self.sample(self.t_ms, 0.0, 0.0, self.ignition(), 0.0)
    }

    fn ignition(&self) -> bool {
        match self.phase {
            Phase::Dwell { engine_on, .. } => engine_on,
            Phase::Drive { .. } => true,
        }
    }

    /// Starts the next leg when the current dwell is over.
    fn advance_phase(&mut self) {
        loop {
            let Phase::Dwell { until_ms: Some(until), .. } = self.phase else {
                return;
            };
            let Some(&leg) = self.route.waypoints.get(self.next_leg) else {
                if self.t_ms < until {
                    return;
                }
                self.finished_at_ms.get_or_insert(until);
                self.phase = Phase::Dwell {
                    until_ms: None,
                    engine_on: false,
                };
                return;
            };
            let depart = until.max(leg.depart_at_ms.unwrap_or(0));
            if self.t_ms < depart {
                self.phase = Phase::Dwell {
                    until_ms: Some(depart),
                    engine_on: self.ignition(),
                };
                return;
            }
            self.next_leg += 1;
            let length_m = haversine_distance(self.position, leg.point);
            if leg.speed_kmh <= 0.0 {
                // A zero-speed leg never gets anywhere.
                self.next_leg = self.route.waypoints.len();
                self.phase = Phase::Dwell {
                    until_ms: None,
                    engine_on: false,
                };
                return;
            }
            if length_m < 0.5 {
                self.phase = Phase::Dwell {
                    until_ms: Some(self.t_ms + (leg.dwell_s * 1000.0) as u64),
                    engine_on: leg.engine_on,
                };
                continue;
            }
            let bearing = initial_bearing(self.position, leg.point).unwrap_or(0.0);
            self.heading_deg = bearing;
            self.phase = Phase::Drive {
                from: self.position,
                to: leg.point,
                bearing,
                length_m,
                travelled_m: 0.0,
                v_ms: 0.0,
                target_ms: leg.speed_kmh / 3.6,
            };
            return;
        }
    }

    /// Advances one tick and returns the truth at the new time.
    pub fn step(&mut self) -> Sample {
        let dt = self.tick_ms as f64 / 1000.0;
        self.t_ms += self.tick_ms;
        let mut ds = 0.0;
        let mut ignition = self.ignition();
        if let Phase::Drive {
            from,
            to,
            bearing,
            length_m,
            travelled_m,
            v_ms,
            target_ms,
        } = self.phase
        {
            let rem = length_m - travelled_m;
            // Largest end speed that still stops in time: v^2 <= 2 D (rem - (v0 + v) dt / 2).
            let slack = rem - v_ms * dt / 2.0;
            let d = DECEL_MS2 * dt;
            let v_cap = if slack > 0.0 { (-d + (d * d + 8.0 * DECEL_MS2 * slack).sqrt()) / 2.0 } else { 0.0 };
            let v_new = target_ms.min(v_ms + ACCEL_MS2 * dt).min(v_cap).max(CRAWL_MS.min(target_ms));
            ds = ((v_ms + v_new) / 2.0 * dt).min(rem);
            let travelled_m = travelled_m + ds;
            if length_m - travelled_m < 1e-6 {
                self.position = to;
                self.arrive();
            } else {
                self.position = destination_point(from, bearing, travelled_m);
                if let Ok(h) = initial_bearing(self.position, to) {
                    self.heading_deg = h;
                }
                self.phase = Phase::Drive {
                    from,
                    to,
                    bearing,
                    length_m,
                    travelled_m,
                    v_ms: v_new,
                    target_ms,
                };
            }
            ignition = true;
        }
        self.odometer_m += ds;
        let speed_kmh = ds / dt * 3.6;
        let accel = (speed_kmh - self.last_speed_kmh) / 3.6 / dt;
        self.last_speed_kmh = speed_kmh;
        let rate = if ignition { self.route.fuel.rate_lh(speed_kmh) } else { 0.0 };
        self.fuel_l = (self.fuel_l - rate * dt / 3600.0).max(0.0);
        self.advance_phase();
        self.sample(self.t_ms, speed_kmh, accel, ignition, rate)
    }

    fn arrive(&mut self) {
        let leg = self.route.waypoints[self.next_leg - 1];
        if self.fuel_l < 0.15 * self.route.fuel.tank_l {
            self.fuel_l = self.route.fuel.tank_l;
        }
        self.phase = Phase::Dwell {
            until_ms: Some(self.t_ms + (leg.dwell_s * 1000.0) as u64),
            engine_on: leg.engine_on,
        };
    }

    fn sample(&self, t_ms: u64, speed_kmh: f64, accel_ms2: f64, ignition: bool, rate: f64) -> Sample {
        Sample {
            t_ms,
            position: self.position,
            speed_kmh,
            heading_deg: self.heading_deg,
            accel_ms2,
            ignition,
            fuel_rate_lh: rate,
            fuel_level_pct: self.fuel_l / self.route.fuel.tank_l * 100.0,
            odometer_m: self.odometer_m,
        }
    }

    /// The sensor frame the tracker sees for `s`.
    pub fn frame(&mut self, s: &Sample) -> SensorFrame {
        let satellites = self.rng.random_range(7..=12);
        let hdop = f64::from(self.rng.random_range(7u8..=16)) / 10.0;
        let fix = Fix {
            timestamp_ms: s.t_ms,
            lat: s.position.lat(),
            lon: s.position.lon(),
            speed_kmh: s.speed_kmh,
            heading_deg: s.heading_deg,
            altitude_m: self.route.altitude_m,
            satellites,
            hdop,
            valid: true,
        };
        let mut frame = SensorFrame::quiet(s.t_ms);
        frame.nmea_lines = serialize_epoch(&fix).expect("route positions are in range");
        frame.ignition = s.ignition;
        frame.accel_mg = [(s.accel_ms2 / STANDARD_GRAVITY * 1000.0).round() as i16, 0, 1000];
        frame.fuel_rate_lh = s.fuel_rate_lh;
        frame.fuel_level_pct = s.fuel_level_pct;
        frame.can_odometer_m = Some(s.odometer_m);
        for e in &self.route.events {
            match *e {
                Injection::Panic { at_ms } => frame.panic_button |= at_ms <= s.t_ms && s.t_ms < at_ms + self.tick_ms,
                Injection::Jamming { from_ms, to_ms } => frame.gsm_jammed |= (from_ms..to_ms).contains(&s.t_ms),
                Injection::PowerCut { from_ms, to_ms } if (from_ms..to_ms).contains(&s.t_ms) => {
                    frame.external_power_v = 0.0;
                }
                Injection::KeySwipe { at_ms, key } if at_ms <= s.t_ms => self.driver_key = Some(key),
                Injection::Input { at_ms, line, on } if at_ms <= s.t_ms && s.t_ms < at_ms + self.tick_ms => {
                    if on {
                        self.digital_in |= 1 << line;
                    } else {
                        self.digital_in &= !(1 << line);
                    }
                }
                _ => {}
            }
        }
        frame.driver_key = self.driver_key;
        frame.digital_in = self.digital_in;
        frame
    }

    /// Tick, then build that tick's frame.
    pub fn next_frame(&mut self) -> (Sample, SensorFrame) {
        let s = self.step();
        let f = self.frame(&s);
        (s, f)
    }
}

/// Frames at `tick_ms` from one tick after the route start until the route is complete.
pub fn generate_trace(route: &RouteScript, tick_ms: u64, seed: u64) -> impl Iterator<Item = SensorFrame> {
    let mut sim = RouteSim::new(route.clone(), tick_ms, seed, 0);
    std::iter::from_fn(move || {
        if sim.finished_at_ms().is_some_and(|end| sim.t_ms >= end) {
            return None;
        }
        Some(sim.next_frame().1)
    })
}

/// Ground-truth samples for the same ticks as [`generate_trace`].
pub fn trace_samples(route: &RouteScript, tick_ms: u64) -> impl Iterator<Item = Sample> {
    let mut sim = RouteSim::new(route.clone(), tick_ms, 0, 0);
    std::iter::from_fn(move || {
        if sim.finished_at_ms().is_some_and(|end| sim.t_ms >= end) {
            return None;
        }
        Some(sim.step())
    })
}
