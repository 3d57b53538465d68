//! Fleet reports computed from stored telemetry records.
//!
//! Every function here is a pure function of its inputs. Records with an invalid fix are
//! ignored for distance and speed.

pub mod fuel;
pub mod maintenance;
pub mod mileage;
pub mod missions;
pub mod nearest;
pub mod speed;
pub mod table;
pub mod trips;

use radfleet_core::geo::GeoPoint;
use radfleet_core::wire::TelemetryRecord;
use serde::Serialize;
use thiserror::Error;

pub use fuel::{fuel_consumption, select_method, FuelMethod, FuelSummary};
pub use maintenance::{maintenance_due, MaintenanceItem, MaintenancePlan, MaintenanceState, MaintenanceStatus, Scope};
pub use mileage::{compare_months, daily_mileage, monthly_report, CompareRow, DayRow, FleetCalendar, MonthRow, YearMonth};
pub use missions::{mission_report, route_fuel_ranking, Mission, MissionBook, MissionReport, RouteRank};
pub use nearest::{nearest_vehicles, NearestResult, RankedVehicle, VehiclePosition, DEFAULT_STALENESS_S};
pub use speed::{eco_score, fuel_by_speed, overspeed_report, speed_stats, EcoScore, SpeedBinRow, SpeedStats, Violation};
pub use table::ReportTable;
pub use trips::{segment_trips, Segmentation, StopEvent, Trip, TripParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("records are not in time order at index {0}")]
    UnorderedInput(usize),
    #[error("no fuel rate or fuel level data")]
    NoFuelData,
    #[error("mission {0} overlaps an existing mission for the same vehicle")]
    OverlappingMission(String),
    #[error("mission window is empty")]
    EmptyWindow,
    #[error("invalid month {0}")]
    BadMonth(String),
    #[error("maintenance interval must be positive")]
    BadInterval,
}

/// Latitude/longitude pair for report output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Position {
    pub lat: f64,
    pub lon: f64,
}

impl Position {
    pub fn of(record: &TelemetryRecord) -> Self {
        Position {
            lat: record.lat(),
            lon: record.lon(),
        }
    }
}

pub(crate) fn point(record: &TelemetryRecord) -> GeoPoint {
    GeoPoint::new(record.lat(), record.lon()).expect("decoded records hold in-range coordinates")
}

/// Valid-fix records, sorted by timestamp (stable, so equal timestamps keep seq order).
pub(crate) fn valid_sorted(records: &[TelemetryRecord]) -> Vec<&TelemetryRecord> {
    let mut out: Vec<&TelemetryRecord> = records.iter().filter(|r| r.fix_valid()).collect();
    out.sort_by_key(|r| (r.timestamp_ms, r.seq));
    out
}

pub(crate) fn path_km(records: &[&TelemetryRecord]) -> f64 {
    let points: Vec<GeoPoint> = records.iter().map(|r| point(r)).collect();
    // + 0.0 folds the -0.0 of an empty sum into 0.0.
    radfleet_core::geo::path_length(&points) / 1000.0 + 0.0
}

