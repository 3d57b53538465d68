//! Mission forms and route fuel ranking.

use std::collections::BTreeMap;

use radfleet_core::wire::TelemetryRecord;
use serde::{Deserialize, Serialize};

use crate::fuel::fuel_consumption;
use crate::trips::{segment_trips, Trip, TripParams};
use crate::{path_km, valid_sorted, AnalyticsError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mission {
    pub id: String,
    pub vehicle: String,
    pub driver: String,
    pub purpose: String,
    /// Half-open window [start_ms, end_ms).
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Mission {
    pub fn overlaps(&self, other: &Mission) -> bool {
        self.vehicle == other.vehicle && self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MissionBook {
    missions: Vec<Mission>,
}

impl MissionBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mission: Mission) -> Result<(), AnalyticsError> {
        if mission.end_ms <= mission.start_ms {
            return Err(AnalyticsError::EmptyWindow);
        }
        if self.missions.iter().any(|m| m.id == mission.id || m.overlaps(&mission)) {
            return Err(AnalyticsError::OverlappingMission(mission.id));
        }
        self.missions.push(mission);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Mission> {
        self.missions.iter().find(|m| m.id == id)
    }

    pub fn missions(&self) -> &[Mission] {
        &self.missions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissionReport {
    pub id: String,
    pub vehicle: String,
    pub driver: String,
    pub mileage_km: f64,
    pub fuel_l: f64,
    pub trips: Vec<Trip>,
}

/// Mileage, fuel and trips of the records inside the mission window. `records` must belong to
/// the mission's vehicle.
pub fn mission_report(
    mission: &Mission,
    records: &[TelemetryRecord],
    params: &TripParams,
) -> Result<MissionReport, AnalyticsError> {
    let mut window: Vec<TelemetryRecord> = records
        .iter()
        .filter(|r| r.timestamp_ms >= mission.start_ms && r.timestamp_ms < mission.end_ms)
        .copied()
        .collect();
    window.sort_by_key(|r| (r.timestamp_ms, r.seq));
    Ok(MissionReport {
        id: mission.id.clone(),
        vehicle: mission.vehicle.clone(),
        driver: mission.driver.clone(),
        mileage_km: path_km(&valid_sorted(&window)),
        fuel_l: fuel_consumption(&window, params.tank_capacity_l).map_or(0.0, |f| f.liters),
        trips: segment_trips(&mission.vehicle, &window, params)?.trips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteRank {
    pub route_signature: Vec<u16>,
    pub trips: usize,
    pub mean_l_per_100km: f64,
    pub mean_duration_s: f64,
}

/// Groups trips that start in `origin_zone` and end in `dest_zone` by their full route
/// signature and ranks the routes by mean L/100km, then by mean duration.
pub fn route_fuel_ranking(trips: &[Trip], origin_zone: u16, dest_zone: u16) -> Vec<RouteRank> {
    let mut groups: BTreeMap<Vec<u16>, Vec<&Trip>> = BTreeMap::new();
    for t in trips {
        if t.distance_km <= 0.0 {
            continue;
        }
        if t.route_signature.first() == Some(&origin_zone) && t.route_signature.last() == Some(&dest_zone) {
            groups.entry(t.route_signature.clone()).or_default().push(t);
        }
    }
    let mut out: Vec<RouteRank> = groups
        .into_iter()
        .map(|(sig, ts)| {
            let n = ts.len() as f64;
            RouteRank {
                route_signature: sig,
                trips: ts.len(),
                mean_l_per_100km: ts.iter().map(|t| t.fuel_l / t.distance_km * 100.0).sum::<f64>() / n,
                mean_duration_s: ts.iter().map(|t| t.duration_s()).sum::<f64>() / n,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.mean_l_per_100km
            .total_cmp(&b.mean_l_per_100km)
            .then(a.mean_duration_s.total_cmp(&b.mean_duration_s))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mission(id: &str, vehicle: &str, start: u64, end: u64) -> Mission {
        Mission {
            id: id.into(),
            vehicle: vehicle.into(),
            driver: "d".into(),
            purpose: "p".into(),
            start_ms: start,
            end_ms: end,
        }
    }

    #[test]
    fn adjacent_windows_do_not_overlap() {
        let mut book = MissionBook::new();
        book.add(mission("a", "v", 0, 100)).unwrap();
        book.add(mission("b", "v", 100, 200)).unwrap();
        book.add(mission("c", "w", 50, 150)).unwrap();
        assert_eq!(book.add(mission("d", "v", 99, 101)), Err(AnalyticsError::OverlappingMission("d".into())));
        assert_eq!(book.add(mission("e", "v", 300, 300)), Err(AnalyticsError::EmptyWindow));
    }
}
