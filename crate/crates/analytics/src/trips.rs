//! Trip and stop segmentation.

use radfleet_core::wire::TelemetryRecord;
use serde::Serialize;

use crate::fuel::fuel_consumption;
use crate::speed::speed_stats;
use crate::{path_km, AnalyticsError, Position};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripParams {
    /// Below this speed a sample counts as stationary.
    pub stop_speed_kmh: f64,
    pub min_stop_s: f64,
    /// An ignition-off span this long opens a stop even if it is shorter than `min_stop_s`.
    pub ignition_stop_s: f64,
    pub min_trip_m: f64,
    /// Used when fuel has to be derived from the level sensor.
    pub tank_capacity_l: f64,
}

impl Default for TripParams {
    fn default() -> Self {
        TripParams {
            stop_speed_kmh: 3.0,
            min_stop_s: 300.0,
            ignition_stop_s: 60.0,
            min_trip_m: 200.0,
            tank_capacity_l: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trip {
    pub vehicle: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub start: Position,
    pub end: Position,
    pub distance_km: f64,
    pub fuel_l: f64,
    pub max_speed_kmh: f64,
    pub avg_speed_kmh: f64,
    /// Geofence ids in the order they were visited, consecutive repeats collapsed.
    pub route_signature: Vec<u16>,
}

impl Trip {
    pub fn duration_s(&self) -> f64 {
        (self.end_ms - self.start_ms) as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopEvent {
    pub vehicle: String,
    pub location: Position,
    pub start_ms: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Segmentation {
    pub trips: Vec<Trip>,
    pub stops: Vec<StopEvent>,
    /// Distance travelled outside any kept trip: drift during stops and trips shorter than
    /// `min_trip_m`.
    pub untracked_km: f64,
}

pub fn check_order(records: &[TelemetryRecord]) -> Result<(), AnalyticsError> {
    match records.windows(2).position(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        Some(i) => Err(AnalyticsError::UnorderedInput(i + 1)),
        None => Ok(()),
    }
}

struct StopSpan {
    /// Index of the first and last stationary record.
    first: usize,
    last: usize,
    end_ms: u64,
}

/// Splits a time-ordered record stream into trips and stops.
///
/// A stationary run (speed below `stop_speed_kmh` or ignition off) becomes a stop when it
/// lasts `min_stop_s`, measured from its first record to the next moving record, or when it
/// contains `ignition_stop_s` of ignition-off time. Everything between stops is a trip
/// candidate; candidates shorter than `min_trip_m` are dropped.
pub fn segment_trips(
    vehicle: &str,
    records: &[TelemetryRecord],
    params: &TripParams,
) -> Result<Segmentation, AnalyticsError> {
    check_order(records)?;
    let recs: Vec<&TelemetryRecord> = records.iter().filter(|r| r.fix_valid()).collect();
    let mut out = Segmentation::default();
    if recs.is_empty() {
        return Ok(out);
    }
    let still = |r: &TelemetryRecord| r.speed_kmh() < params.stop_speed_kmh || !r.ignition();

    let mut stops: Vec<StopSpan> = Vec::new();
    let mut i = 0;
    while i < recs.len() {
        if !still(recs[i]) {
            i += 1;
            continue;
        }
        let first = i;
        while i + 1 < recs.len() && still(recs[i + 1]) {
            i += 1;
        }
        let last = i;
        let end_ms = recs.get(last + 1).map_or(recs[last].timestamp_ms, |r| r.timestamp_ms);
        let duration_s = (end_ms - recs[first].timestamp_ms) as f64 / 1000.0;
        let ignition_off_s = ignition_off_seconds(&recs[first..=last], end_ms);
        if duration_s >= params.min_stop_s || ignition_off_s >= params.ignition_stop_s {
            stops.push(StopSpan { first, last, end_ms });
        }
        i += 1;
    }

    for s in &stops {
        out.untracked_km += path_km(&recs[s.first..=s.last]);
        out.stops.push(StopEvent {
            vehicle: vehicle.to_string(),
            location: Position::of(recs[s.first]),
            start_ms: recs[s.first].timestamp_ms,
            duration_s: (s.end_ms - recs[s.first].timestamp_ms) as f64 / 1000.0,
        });
    }

    // Trip candidates: the records between consecutive stops, including the last stationary
    // record before departure and the first one on arrival.
    let mut bounds: Vec<(usize, usize, u64, u64)> = Vec::new();
    let mut from = 0usize;
    let mut from_ms = recs[0].timestamp_ms;
    for s in &stops {
        if s.first > from {
            bounds.push((from, s.first, from_ms, recs[s.first].timestamp_ms));
        }
        from = s.last;
        from_ms = s.end_ms;
    }
    let tail = recs.len() - 1;
    if stops.last().is_none_or(|s| s.last < tail) {
        bounds.push((from, tail, from_ms, recs[tail].timestamp_ms));
    }

    for (a, b, start_ms, end_ms) in bounds {
        let members = &recs[a..=b];
        let km = path_km(members);
        if km * 1000.0 < params.min_trip_m || end_ms <= start_ms {
            out.untracked_km += km;
            continue;
        }
        let owned: Vec<TelemetryRecord> = members.iter().map(|r| **r).collect();
        let stats = speed_stats(&owned, params.stop_speed_kmh);
        let fuel_l = fuel_consumption(&owned, params.tank_capacity_l).map_or(0.0, |f| f.liters);
        out.trips.push(Trip {
            vehicle: vehicle.to_string(),
            start_ms,
            end_ms,
            start: Position::of(members[0]),
            end: Position::of(members[members.len() - 1]),
            distance_km: km,
            fuel_l,
            max_speed_kmh: stats.max_kmh,
            avg_speed_kmh: stats.avg_kmh,
            route_signature: route_signature(members),
        });
    }
    Ok(out)
}

fn ignition_off_seconds(run: &[&TelemetryRecord], end_ms: u64) -> f64 {
    let mut total = 0u64;
    for (k, r) in run.iter().enumerate() {
        if !r.ignition() {
            let next = run.get(k + 1).map_or(end_ms, |n| n.timestamp_ms);
            total += next - r.timestamp_ms;
        }
    }
    total as f64 / 1000.0
}

pub(crate) fn route_signature(records: &[&TelemetryRecord]) -> Vec<u16> {
    let mut sig: Vec<u16> = Vec::new();
    for r in records {
        if r.geofence_id != 0 && sig.last() != Some(&r.geofence_id) {
            sig.push(r.geofence_id);
        }
    }
    sig
}
