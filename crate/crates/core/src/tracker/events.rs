//! Event detection and acquisition triggers.

use super::power::{accel_deviation_mg, PowerMode, MOVEMENT_THRESHOLD_MG, MOVING_SPEED_KMH};
use super::{SensorFrame, TrackerState};
use crate::geo::{haversine_distance, GeoPoint};
use crate::nmea::Fix;
use crate::tracker::config::TrackerConfig;
use crate::wire::EventCode;

/// Overspeed must persist this long before it is reported.
pub const OVERSPEED_SUSTAIN_MS: u64 = 10_000;
/// Overspeed re-arms once speed drops this far below the limit.
pub const OVERSPEED_HYSTERESIS_KMH: f64 = 5.0;
/// Ignition-off displacement that counts as towing.
pub const TOWING_DISTANCE_M: f64 = 100.0;
pub const TOWING_SHAKE_SUSTAIN_MS: u64 = 5_000;

const STANDARD_GRAVITY: f64 = 9.806_65;

/// Latches once a condition has held for a minimum time; re-arms when it clears.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Sustained {
    since_ms: Option<u64>,
    fired: bool,
}

impl Sustained {
    /// True exactly once per episode, on the tick the condition reaches `hold_ms`.
    pub fn update(&mut self, condition: bool, now_ms: u64, hold_ms: u64) -> bool {
        if !condition {
            *self = Sustained::default();
            return false;
        }
        let since = *self.since_ms.get_or_insert(now_ms);
        if !self.fired && now_ms - since >= hold_ms {
            self.fired = true;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OverspeedMonitor {
    above_since_ms: Option<u64>,
    latched: bool,
}

impl OverspeedMonitor {
    pub fn update(&mut self, speed_kmh: f64, limit_kmh: f64, now_ms: u64) -> bool {
        if self.latched {
            if speed_kmh < limit_kmh - OVERSPEED_HYSTERESIS_KMH {
                *self = OverspeedMonitor::default();
            }
            return false;
        }
        if speed_kmh > limit_kmh {
            let since = *self.above_since_ms.get_or_insert(now_ms);
            if now_ms - since >= OVERSPEED_SUSTAIN_MS {
                self.latched = true;
                return true;
            }
        } else {
            self.above_since_ms = None;
        }
        false
    }

    pub fn active(&self) -> bool {
        self.latched
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TowingMonitor {
    park_point: Option<GeoPoint>,
    shake: Sustained,
    latched: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EcoMonitor {
    accel: Sustained,
    brake: Sustained,
    corner: Sustained,
}

/// Input levels remembered from the previous frame for edge detection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InputLatch {
    pub ignition: Option<bool>,
    pub digital_in: Option<u8>,
    pub panic: bool,
    pub jammed: bool,
    pub external_power: Option<bool>,
}

/// Everything but geofence crossings, which need zone ids and are handled by the step loop.
/// `fix` is this tick's valid fix, if any.
pub fn detect_events(
    state: &mut TrackerState,
    frame: &SensorFrame,
    fix: Option<&Fix>,
    config: &TrackerConfig,
) -> Vec<EventCode> {
    let now = frame.tick_time_ms;
    let mut events = Vec::new();

    if let Some(was_on) = state.inputs.ignition {
        if frame.ignition && !was_on {
            events.push(EventCode::IgnitionOn);
            let key = frame.driver_key.or(state.driver_key);
            state.authorized = config.authorized_keys.is_empty()
                || key.is_some_and(|k| config.authorized_keys.contains(&k));
            if !state.authorized {
                events.push(EventCode::UnauthorizedDriver);
            }
        } else if !frame.ignition && was_on {
            events.push(EventCode::IgnitionOff);
            state.driver_key = None;
            state.towing = TowingMonitor {
                park_point: state.last_fix.map(|(_, f)| f.position()),
                ..TowingMonitor::default()
            };
        }
    }
    if let Some(key) = frame.driver_key {
        state.driver_key = Some(key);
    }

    if frame.panic_button && !state.inputs.panic {
        events.push(EventCode::Panic);
    }
    if frame.gsm_jammed && !state.inputs.jammed {
        events.push(EventCode::JammingDetected);
    }
    let din = frame.digital_in & 0x0f;
    if state.inputs.digital_in.is_some_and(|prev| prev != din) {
        events.push(EventCode::IoChange);
    }

    if let Some(fix) = fix {
        if state.overspeed.update(fix.speed_kmh, config.speed_limit_kmh, now) {
            events.push(EventCode::Overspeed);
        }
    }

    if frame.ignition {
        state.towing = TowingMonitor::default();
        let eco = &config.eco;
        let [x, y, _] = frame.accel_mg.map(|a| f64::from(a) * STANDARD_GRAVITY / 1000.0);
        if state.eco.accel.update(x >= eco.harsh_accel_ms2, now, eco.sustain_ms) {
            events.push(EventCode::HarshAccel);
        }
        if state.eco.brake.update(x <= eco.harsh_brake_ms2, now, eco.sustain_ms) {
            events.push(EventCode::HarshBrake);
        }
        if state.eco.corner.update(y.abs() >= eco.harsh_corner_ms2, now, eco.sustain_ms) {
            events.push(EventCode::HarshCorner);
        }
    } else {
        state.eco = EcoMonitor::default();
        let towing = &mut state.towing;
        if let Some(fix) = fix {
            towing.park_point.get_or_insert(fix.position());
        }
        let displaced = match (towing.park_point, fix) {
            (Some(park), Some(fix)) => haversine_distance(park, fix.position()) > TOWING_DISTANCE_M,
            _ => false,
        };
        let shaken = towing.shake.update(
            accel_deviation_mg(frame.accel_mg) > MOVEMENT_THRESHOLD_MG,
            now,
            TOWING_SHAKE_SUSTAIN_MS,
        );
        if !towing.latched && (displaced || shaken) && state.inputs.ignition.is_some() {
            towing.latched = true;
            events.push(EventCode::Towing);
        }
    }

    state.inputs.ignition = Some(frame.ignition);
    state.inputs.digital_in = Some(din);
    state.inputs.panic = frame.panic_button;
    state.inputs.jammed = frame.gsm_jammed;
    events
}

/// Smallest angle between two headings, in degrees.
pub fn heading_change(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Periodic,
    DistanceTrig,
    AngleTrig,
}

impl From<Trigger> for EventCode {
    fn from(t: Trigger) -> Self {
        match t {
            Trigger::Periodic => EventCode::Periodic,
            Trigger::DistanceTrig => EventCode::DistanceTrig,
            Trigger::AngleTrig => EventCode::AngleTrig,
        }
    }
}

/// Time/distance/angle acquisition for a valid fix. When several fire, the label is
/// angle over distance over time. In Idle only the stationary keep-alive applies.
pub fn evaluate_acquisition(
    state: &TrackerState,
    fix: &Fix,
    config: &TrackerConfig,
    now_ms: u64,
) -> Option<Trigger> {
    let (Some(last_time), Some(last_fix)) = (state.last_record_time_ms, state.last_sent_fix) else {
        return Some(Trigger::Periodic);
    };
    let idle = state.power_mode == PowerMode::Idle;
    let moving = fix.speed_kmh >= MOVING_SPEED_KMH;
    let interval_s = if moving && !idle {
        config.time_trigger_moving_s
    } else {
        config.time_trigger_stationary_s
    };
    if !idle && moving && heading_change(fix.heading_deg, last_fix.heading_deg) >= config.angle_trigger_deg {
        return Some(Trigger::AngleTrig);
    }
    if !idle && haversine_distance(last_fix.position(), fix.position()) >= config.distance_trigger_m {
        return Some(Trigger::DistanceTrig);
    }
    if now_ms.saturating_sub(last_time) >= interval_s * 1000 {
        return Some(Trigger::Periodic);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_heading_difference() {
        assert_eq!(heading_change(355.0, 8.0), 13.0);
        assert_eq!(heading_change(8.0, 355.0), 13.0);
        assert_eq!(heading_change(0.0, 180.0), 180.0);
        assert_eq!(heading_change(90.0, 90.0), 0.0);
        // Brute-force oracle: step around the circle one hundredth of a degree at a time.
        for (a, b) in [(10.0, 350.0), (123.4, 301.9), (0.0, 359.99), (270.0, 45.5)] {
            let steps = |from: f64, to: f64| {
                let mut n = 0u32;
                let mut h: f64 = from;
                while (h - to).abs() > 1e-6 && n < 36_000 {
                    h = (h + 0.01).rem_euclid(360.0);
                    if (h - 360.0).abs() < 1e-9 {
                        h = 0.0;
                    }
                    h = (h * 100.0).round() / 100.0;
                    n += 1;
                }
                f64::from(n) / 100.0
            };
            let oracle = steps(a, b).min(steps(b, a));
            assert!((heading_change(a, b) - oracle).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn sustained_fires_once_per_episode() {
        let mut s = Sustained::default();
        let fired: Vec<bool> = (0..5).map(|t| s.update(true, t * 1000, 2000)).collect();
        assert_eq!(fired, vec![false, false, true, false, false]);
        assert!(!s.update(false, 5000, 2000));
        assert!(!s.update(true, 6000, 2000));
        assert!(s.update(true, 8000, 2000));
    }

    #[test]
    fn overspeed_hysteresis_trace() {
        // Oracle written out by hand for limit 80: above for 10 s fires once, stays latched
        // in the 75..80 dead band, re-arms below 75.
        let mut m = OverspeedMonitor::default();
        let mut fired = Vec::new();
        let trace: Vec<f64> = [vec![95.0; 12], vec![78.0; 5], vec![95.0; 12], vec![70.0; 2], vec![95.0; 11]]
            .concat();
        for (t, v) in trace.iter().enumerate() {
            if m.update(*v, 80.0, t as u64 * 1000) {
                fired.push(t);
            }
        }
        assert_eq!(fired, vec![10, 41]);
    }

    #[test]
    fn dipping_before_ten_seconds_resets() {
        let mut m = OverspeedMonitor::default();
        // Five seconds above, one at the limit (not above), then above again from t=6.
        let trace: Vec<f64> = [vec![95.0; 5], vec![80.0], vec![95.0; 12]].concat();
        let fired: Vec<usize> = trace
            .iter()
            .enumerate()
            .filter_map(|(t, v)| m.update(*v, 80.0, t as u64 * 1000).then_some(t))
            .collect();
        assert_eq!(fired, vec![16]);
    }
}
