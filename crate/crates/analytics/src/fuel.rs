//! Fuel consumption from the rate channel or the tank level sensor.

use radfleet_core::wire::TelemetryRecord;
use serde::Serialize;

use crate::AnalyticsError;

/// Level increases larger than this (percentage points) are treated as refuels.
pub const REFUEL_THRESHOLD_PCT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FuelMethod {
    RateIntegration,
    LevelDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FuelSummary {
    pub method: FuelMethod,
    pub liters: f64,
    pub refuel_events: u32,
}

/// Rate integration when any record carries a fuel rate, level drop otherwise.
pub fn select_method(records: &[TelemetryRecord]) -> Result<FuelMethod, AnalyticsError> {
    if records.iter().any(|r| r.fuel_rate_dlh > 0) {
        Ok(FuelMethod::RateIntegration)
    } else if records.iter().any(|r| r.fuel_level_dpct > 0) {
        Ok(FuelMethod::LevelDrop)
    } else {
        Err(AnalyticsError::NoFuelData)
    }
}

/// Liters consumed over `records`, sorted by time internally.
///
/// Rate integration holds each record's rate until the next record. Level drop sums the
/// decreases times the tank capacity; an increase above the refuel threshold is counted as a
/// refuel, smaller increases as sensor noise.
pub fn fuel_consumption(records: &[TelemetryRecord], tank_capacity_l: f64) -> Result<FuelSummary, AnalyticsError> {
    let method = select_method(records)?;
    let mut sorted: Vec<&TelemetryRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.timestamp_ms, r.seq));
    let mut liters = 0.0;
    let mut refuel_events = 0;
    for w in sorted.windows(2) {
        match method {
            FuelMethod::RateIntegration => liters += segment_rate_liters(w[0], w[1]),
            FuelMethod::LevelDrop => {
                let delta = w[1].fuel_level_pct() - w[0].fuel_level_pct();
                if delta < 0.0 {
                    liters += -delta / 100.0 * tank_capacity_l;
                } else if delta > REFUEL_THRESHOLD_PCT {
                    refuel_events += 1;
                }
            }
        }
    }
    Ok(FuelSummary {
        method,
        liters,
        refuel_events,
    })
}

pub(crate) fn segment_rate_liters(a: &TelemetryRecord, b: &TelemetryRecord) -> f64 {
    let hours = (b.timestamp_ms - a.timestamp_ms) as f64 / 3_600_000.0;
    a.fuel_rate_lh() * hours
}

pub(crate) fn segment_level_liters(a: &TelemetryRecord, b: &TelemetryRecord, tank_capacity_l: f64) -> f64 {
    let drop = a.fuel_level_pct() - b.fuel_level_pct();
    if drop > 0.0 {
        drop / 100.0 * tank_capacity_l
    } else {
        0.0
    }
}
