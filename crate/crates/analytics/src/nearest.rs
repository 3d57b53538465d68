//! Nearest-vehicle ranking for dispatch.

use radfleet_core::geo::{haversine_distance, GeoPoint};
use serde::{Deserialize, Serialize};

pub const DEFAULT_STALENESS_S: f64 = 900.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePosition {
    pub vehicle: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedVehicle {
    pub vehicle: String,
    pub distance_m: f64,
    pub age_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct NearestResult {
    pub ranked: Vec<RankedVehicle>,
    /// Vehicles whose last fix is older than the staleness bound, nearest first.
    pub stale: Vec<RankedVehicle>,
}

/// Ranks vehicles by great-circle distance from `target`, ties broken by vehicle id.
/// At most `limit` fresh vehicles are returned.
pub fn nearest_vehicles(
    target: GeoPoint,
    positions: &[VehiclePosition],
    limit: usize,
    now_ms: u64,
    staleness_max_s: f64,
) -> NearestResult {
    let mut out = NearestResult::default();
    for p in positions {
        let Ok(at) = GeoPoint::new(p.lat, p.lon) else {
            continue;
        };
        let ranked = RankedVehicle {
            vehicle: p.vehicle.clone(),
            distance_m: haversine_distance(target, at),
            age_s: now_ms.saturating_sub(p.timestamp_ms) as f64 / 1000.0,
        };
        if ranked.age_s > staleness_max_s {
            out.stale.push(ranked);
        } else {
            out.ranked.push(ranked);
        }
    }
    let order = |a: &RankedVehicle, b: &RankedVehicle| {
        a.distance_m.total_cmp(&b.distance_m).then_with(|| a.vehicle.cmp(&b.vehicle))
    };
    out.ranked.sort_by(order);
    out.ranked.truncate(limit);
    out.stale.sort_by(order);
    out
}
