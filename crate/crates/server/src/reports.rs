//! Report queries over a consistent snapshot of one vehicle's records.

use chrono::{DateTime, NaiveDate};
use radfleet_analytics::{
    compare_months, daily_mileage, fuel_by_speed, maintenance_due, mission_report, monthly_report, nearest_vehicles,
    segment_trips, speed_stats, CompareRow, DayRow, MaintenanceStatus, MissionReport, MonthRow, NearestResult,
    Segmentation, SpeedBinRow, SpeedStats, TripParams, VehiclePosition, YearMonth,
};
use radfleet_core::geo::GeoPoint;
use radfleet_core::wire::TelemetryRecord;

use crate::fleet::FleetServer;
use crate::registry::DeviceEntry;
use crate::ServerError;

pub const MOVING_KMH: f64 = 3.0;

impl FleetServer {
    /// The device entry and a copy of its records sorted by device time.
    pub fn snapshot(&self, vehicle: &str) -> Result<(DeviceEntry, Vec<TelemetryRecord>), ServerError> {
        let st = self.lock();
        let device = st
            .registry
            .resolve(vehicle)
            .cloned()
            .ok_or_else(|| ServerError::UnknownDevice(vehicle.into()))?;
        let mut records: Vec<TelemetryRecord> = st.store.records(device.imei()).iter().map(|p| p.record).collect();
        drop(st);
        records.sort_by_key(|r| (r.timestamp_ms, r.seq));
        Ok((device, records))
    }

    fn tank(&self, device: &DeviceEntry) -> f64 {
        device.tank_capacity_l.unwrap_or(self.config().default_tank_capacity_l)
    }

    fn trip_params(&self, device: &DeviceEntry) -> TripParams {
        TripParams {
            tank_capacity_l: self.tank(device),
            ..TripParams::default()
        }
    }

    pub fn report_daily(&self, vehicle: &str, month: YearMonth) -> Result<Vec<DayRow>, ServerError> {
        let (device, records) = self.snapshot(vehicle)?;
        Ok(daily_mileage(&records, month, self.calendar(), self.tank(&device)))
    }

    pub fn report_monthly(&self, vehicle: &str, from: YearMonth, to: YearMonth) -> Result<Vec<MonthRow>, ServerError> {
        if to < from {
            return Err(ServerError::BadRequest(format!("month range {from}..{to} is empty")));
        }
        let (device, records) = self.snapshot(vehicle)?;
        Ok(monthly_report(&records, from, to, self.calendar(), self.tank(&device)))
    }

    pub fn report_compare(&self, vehicle: &str, a: YearMonth, b: YearMonth) -> Result<Vec<CompareRow>, ServerError> {
        let (device, records) = self.snapshot(vehicle)?;
        Ok(compare_months(&records, a, b, self.calendar(), self.tank(&device)))
    }

    pub fn report_fuel_by_speed(&self, vehicle: &str, from_ms: u64, to_ms: u64) -> Result<Vec<SpeedBinRow>, ServerError> {
        let (device, records) = self.snapshot(vehicle)?;
        let window = in_window(&records, from_ms, to_ms);
        Ok(fuel_by_speed(&window, MOVING_KMH, self.tank(&device)))
    }

    pub fn report_speed(&self, vehicle: &str, from_ms: u64, to_ms: u64) -> Result<SpeedStats, ServerError> {
        let (_, records) = self.snapshot(vehicle)?;
        Ok(speed_stats(&in_window(&records, from_ms, to_ms), MOVING_KMH))
    }

    pub fn report_trips(&self, vehicle: &str, from_ms: u64, to_ms: u64) -> Result<Segmentation, ServerError> {
        let (device, records) = self.snapshot(vehicle)?;
        Ok(segment_trips(&device.label, &in_window(&records, from_ms, to_ms), &self.trip_params(&device))?)
    }

    /// Maintenance against the odometer of the newest record. Per-vehicle items are keyed by
    /// the vehicle label.
    pub fn report_maintenance(&self, vehicle: &str) -> Result<Vec<MaintenanceStatus>, ServerError> {
        let (device, records) = self.snapshot(vehicle)?;
        let odometer_km = records.last().map_or(0.0, |r| f64::from(r.odometer_m) / 1000.0);
        let st = self.lock();
        Ok(maintenance_due(&st.plan, &device.label, device.class.as_deref(), odometer_km))
    }

    pub fn report_mission(&self, id: &str) -> Result<MissionReport, ServerError> {
        let mission = self
            .lock()
            .missions
            .get(id)
            .cloned()
            .ok_or_else(|| ServerError::NotFound(format!("mission {id}")))?;
        let (device, records) = self.snapshot(&mission.vehicle)?;
        Ok(mission_report(&mission, &records, &self.trip_params(&device))?)
    }

    /// Ranks enabled vehicles by distance from their latest valid fix.
    pub fn nearest(&self, lat: f64, lon: f64, limit: usize) -> Result<NearestResult, ServerError> {
        let target = GeoPoint::new(lat, lon).map_err(|e| ServerError::BadRequest(e.to_string()))?;
        let positions: Vec<VehiclePosition> = self
            .latest_positions()
            .into_iter()
            .filter_map(|v| {
                v.last.map(|p| VehiclePosition {
                    vehicle: v.label,
                    lat: p.lat,
                    lon: p.lon,
                    timestamp_ms: p.timestamp_ms,
                })
            })
            .collect();
        Ok(nearest_vehicles(target, &positions, limit, self.now_ms(), self.config().stale_after_s))
    }

    /// Accepts epoch milliseconds, RFC 3339, or a fleet-local date (its midnight).
    pub fn parse_time(&self, s: &str) -> Result<u64, ServerError> {
        if let Ok(ms) = s.parse::<u64>() {
            return Ok(ms);
        }
        if let Ok(t) = DateTime::parse_from_rfc3339(s) {
            return u64::try_from(t.timestamp_millis()).map_err(|_| ServerError::BadRequest(format!("time {s}")));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return u64::try_from(self.calendar().day_start_ms(d)).map_err(|_| ServerError::BadRequest(format!("time {s}")));
        }
        Err(ServerError::BadRequest(format!("unrecognized time '{s}'")))
    }
}

fn in_window(records: &[TelemetryRecord], from_ms: u64, to_ms: u64) -> Vec<TelemetryRecord> {
    records
        .iter()
        .filter(|r| r.timestamp_ms >= from_ms && r.timestamp_ms < to_ms)
        .copied()
        .collect()
}
