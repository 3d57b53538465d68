//! Speed statistics, violations, fuel by speed band and eco scoring.

use radfleet_core::geo::haversine_distance;
use radfleet_core::wire::TelemetryRecord;
use serde::Serialize;

use crate::fuel::{segment_level_liters, segment_rate_liters, select_method, FuelMethod};
use crate::{path_km, point, valid_sorted};

pub const SPEED_BIN_KMH: f64 = 10.0;
/// Bins 0-10 .. 110-120 plus an open 120+ bin.
pub const SPEED_BINS: usize = 13;
/// Below this many kilometres a bin reports no L/100km figure.
pub const MIN_BIN_KM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SpeedStats {
    pub avg_kmh: f64,
    pub max_kmh: f64,
    pub moving_s: f64,
}

/// Time-weighted average over moving samples (each sample holds until the next record) and the
/// maximum moving speed. Invalid fixes are skipped.
pub fn speed_stats(records: &[TelemetryRecord], moving_kmh: f64) -> SpeedStats {
    let recs = valid_sorted(records);
    let mut stats = SpeedStats::default();
    let mut weighted = 0.0;
    for (k, r) in recs.iter().enumerate() {
        let v = r.speed_kmh();
        if v < moving_kmh {
            continue;
        }
        stats.max_kmh = stats.max_kmh.max(v);
        if let Some(next) = recs.get(k + 1) {
            let dt = (next.timestamp_ms - r.timestamp_ms) as f64 / 1000.0;
            weighted += v * dt;
            stats.moving_s += dt;
        }
    }
    stats.avg_kmh = if stats.moving_s > 0.0 { weighted / stats.moving_s } else { stats.max_kmh };
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub start_ms: u64,
    pub duration_s: f64,
    pub peak_kmh: f64,
}

/// Contiguous runs of valid samples strictly above `limit_kmh`. A run lasts until the first
/// sample back at or below the limit, or until its last sample when the trace ends inside it.
pub fn overspeed_report(records: &[TelemetryRecord], limit_kmh: f64) -> Vec<Violation> {
    let recs = valid_sorted(records);
    let mut out = Vec::new();
    let mut i = 0;
    while i < recs.len() {
        if recs[i].speed_kmh() <= limit_kmh {
            i += 1;
            continue;
        }
        let start = i;
        let mut peak = 0.0f64;
        while i < recs.len() && recs[i].speed_kmh() > limit_kmh {
            peak = peak.max(recs[i].speed_kmh());
            i += 1;
        }
        let end_ms = recs.get(i).unwrap_or(&recs[i - 1]).timestamp_ms;
        out.push(Violation {
            start_ms: recs[start].timestamp_ms,
            duration_s: (end_ms - recs[start].timestamp_ms) as f64 / 1000.0,
            peak_kmh: peak,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedBinRow {
    /// "0-10", "10-20", ... "120+".
    pub bin: String,
    pub lower_kmh: f64,
    pub km: f64,
    pub liters: f64,
    pub l_per_100km: Option<f64>,
}

pub fn speed_bin(speed_kmh: f64) -> usize {
    ((speed_kmh / SPEED_BIN_KMH).floor().max(0.0) as usize).min(SPEED_BINS - 1)
}

fn bin_label(i: usize) -> String {
    let lo = i * SPEED_BIN_KMH as usize;
    if i == SPEED_BINS - 1 {
        format!("{lo}+")
    } else {
        format!("{lo}-{}", lo + SPEED_BIN_KMH as usize)
    }
}

/// Distance and fuel of each moving segment, attributed to the speed bin of the segment's
/// first sample.
pub fn fuel_by_speed(records: &[TelemetryRecord], moving_kmh: f64, tank_capacity_l: f64) -> Vec<SpeedBinRow> {
    let method = select_method(records).ok();
    let recs = valid_sorted(records);
    let mut km = [0.0f64; SPEED_BINS];
    let mut liters = [0.0f64; SPEED_BINS];
    for w in recs.windows(2) {
        let v = w[0].speed_kmh();
        if v < moving_kmh {
            continue;
        }
        let b = speed_bin(v);
        km[b] += haversine_distance(point(w[0]), point(w[1])) / 1000.0;
        liters[b] += match method {
            Some(FuelMethod::RateIntegration) => segment_rate_liters(w[0], w[1]),
            Some(FuelMethod::LevelDrop) => segment_level_liters(w[0], w[1], tank_capacity_l),
            None => 0.0,
        };
    }
    (0..SPEED_BINS)
        .map(|b| SpeedBinRow {
            bin: bin_label(b),
            lower_kmh: b as f64 * SPEED_BIN_KMH,
            km: km[b],
            liters: liters[b],
            l_per_100km: (km[b] >= MIN_BIN_KM).then(|| liters[b] / km[b] * 100.0),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcoScore {
    pub events: u32,
    pub km: f64,
    pub score: f64,
}

/// max(0, 10 - harsh events per 100 km). With no distance, any event scores 0.
pub fn eco_score(records: &[TelemetryRecord]) -> EcoScore {
    let events = records.iter().filter(|r| r.event_code().is_eco()).count() as u32;
    let km = path_km(&valid_sorted(records));
    let score = if events == 0 {
        10.0
    } else if km > 0.0 {
        (10.0 - f64::from(events) / km * 100.0).max(0.0)
    } else {
        0.0
    };
    EcoScore { events, km, score }
}
