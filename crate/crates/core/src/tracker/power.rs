//! Battery and sleep-mode model.

use super::{SensorFrame, TrackerState};
use crate::tracker::config::TrackerConfig;
use crate::wire::EventCode;

/// 1800 mAh in microampere-seconds; integer charge keeps long drains exact.
pub const BATTERY_CAPACITY_UAS: u64 = 1_800 * 3_600 * 1_000;
pub const CHARGE_CURRENT_MA: u64 = 500;
/// External supply at or above this voltage charges the battery.
pub const EXTERNAL_POWER_MIN_V: f64 = 6.0;
/// Accelerometer magnitude deviation from 1 g that counts as movement.
pub const MOVEMENT_THRESHOLD_MG: f64 = 100.0;
/// GPS speed at or above which the vehicle counts as moving.
pub const MOVING_SPEED_KMH: f64 = 3.0;

const BATTERY_EMPTY_MV: f64 = 3_300.0;
const BATTERY_FULL_MV: f64 = 4_200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PowerMode {
    Active,
    /// Engine on, vehicle stationary: GPS stays on, acquisition drops to keep-alives.
    Idle,
    /// GPS off, modem on.
    NormalSleep,
    /// GPS off, modem off.
    DeepSleep,
}

impl PowerMode {
    /// Average draw in mA. Active uses the midpoint of the 70-100 mA range.
    pub fn current_ma(self) -> u64 {
        match self {
            PowerMode::Active | PowerMode::Idle => 85,
            PowerMode::NormalSleep => 10,
            PowerMode::DeepSleep => 3,
        }
    }

    pub fn gps_on(self) -> bool {
        matches!(self, PowerMode::Active | PowerMode::Idle)
    }

    pub fn modem_on(self) -> bool {
        !matches!(self, PowerMode::DeepSleep)
    }

    pub fn name(self) -> &'static str {
        match self {
            PowerMode::Active => "active",
            PowerMode::Idle => "idle",
            PowerMode::NormalSleep => "normal-sleep",
            PowerMode::DeepSleep => "deep-sleep",
        }
    }
}

pub(crate) fn accel_deviation_mg(accel: [i16; 3]) -> f64 {
    let [x, y, z] = accel.map(f64::from);
    ((x * x + y * y + z * z).sqrt() - 1000.0).abs()
}

/// Battery voltage reported in records: linear between empty and full.
pub fn battery_mv(charge_uas: u64) -> u16 {
    let soc = charge_uas as f64 / BATTERY_CAPACITY_UAS as f64;
    (BATTERY_EMPTY_MV + (BATTERY_FULL_MV - BATTERY_EMPTY_MV) * soc).round() as u16
}

/// Advance the battery and power mode by `dt_ms`. Returns `PowerCutoff` when the external
/// supply falls below 6 V.
pub fn power_tick(
    state: &mut TrackerState,
    frame: &SensorFrame,
    config: &TrackerConfig,
    dt_ms: u64,
) -> Vec<EventCode> {
    let now = frame.tick_time_ms;
    let external = frame.external_power_v >= EXTERNAL_POWER_MIN_V;
    if external {
        state.battery_uas = (state.battery_uas + CHARGE_CURRENT_MA * dt_ms).min(BATTERY_CAPACITY_UAS);
    } else {
        // mA x ms = uA x s
        state.battery_uas = state
            .battery_uas
            .saturating_sub(state.power_mode.current_ma() * dt_ms);
    }

    let mut events = Vec::new();
    if state.inputs.external_power == Some(true) && !external {
        events.push(EventCode::PowerCutoff);
    }
    state.inputs.external_power = Some(external);

    let gps_moving = state
        .last_fix
        .filter(|(tick, _)| now.saturating_sub(*tick) <= 2_000)
        .is_some_and(|(_, fix)| fix.speed_kmh >= MOVING_SPEED_KMH);
    let moving = gps_moving || accel_deviation_mg(frame.accel_mg) > MOVEMENT_THRESHOLD_MG;
    let last_activity = *state.last_activity_ms.get_or_insert(now);

    if frame.ignition || frame.panic_button || moving {
        state.last_activity_ms = Some(now);
        if frame.ignition && !moving {
            let since = *state.stationary_since_ms.get_or_insert(now);
            state.power_mode = if now - since >= config.idle_after_s * 1000 {
                PowerMode::Idle
            } else {
                PowerMode::Active
            };
        } else {
            state.stationary_since_ms = None;
            state.power_mode = PowerMode::Active;
        }
    } else {
        state.stationary_since_ms = None;
        let inactive = now.saturating_sub(last_activity);
        if inactive >= config.t_deep_s * 1000 {
            state.power_mode = PowerMode::DeepSleep;
        } else if inactive >= config.t_normal_s * 1000 {
            if matches!(state.power_mode, PowerMode::Active | PowerMode::Idle) {
                state.power_mode = PowerMode::NormalSleep;
            }
        } else if state.power_mode == PowerMode::Idle {
            state.power_mode = PowerMode::Active;
        }
    }
    events
}
