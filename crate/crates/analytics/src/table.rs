//! Report tables: aligned plain text for terminals, RFC 4180 CSV for spreadsheets.

use radfleet_core::wire::iso8601;
use serde::Serialize;

use crate::maintenance::MaintenanceStatus;
use crate::mileage::{CompareRow, DayRow, MonthRow};
use crate::missions::MissionReport;
use crate::nearest::NearestResult;
use crate::speed::SpeedBinRow;
use crate::trips::{StopEvent, Trip};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ReportTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn km(x: f64) -> String {
    format!("{:.3}", x + 0.0)
}

fn opt(x: Option<f64>) -> String {
    x.map(km).unwrap_or_default()
}

impl ReportTable {
    pub fn new(headers: &[&str]) -> Self {
        ReportTable {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    /// CSV with a header row, CRLF line endings and quoting only where needed.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(&self.headers).expect("writing to memory");
        for row in &self.rows {
            w.write_record(row).expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }

    /// Columns padded to their widest cell; numbers right-aligned.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let numeric: Vec<bool> = (0..self.headers.len())
            .map(|c| !self.rows.is_empty() && self.rows.iter().all(|r| r[c].is_empty() || r[c].parse::<f64>().is_ok()))
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if numeric[c] {
                        format!("{cell:>w$}", w = widths[c])
                    } else {
                        format!("{cell:<w$}", w = widths[c])
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn daily(rows: &[DayRow]) -> Self {
        let mut t = ReportTable::new(&["day", "date", "km", "liters"]);
        for r in rows {
            t.push(vec![r.day.to_string(), r.date.to_string(), km(r.km), km(r.liters)]);
        }
        t
    }

    pub fn monthly(rows: &[MonthRow]) -> Self {
        let mut t = ReportTable::new(&["month", "km", "liters"]);
        for r in rows {
            t.push(vec![r.month.to_string(), km(r.km), km(r.liters)]);
        }
        t
    }

    pub fn compare(rows: &[CompareRow]) -> Self {
        let mut t = ReportTable::new(&["day", "km_a", "km_b", "liters_a", "liters_b"]);
        for r in rows {
            t.push(vec![r.day.to_string(), km(r.km_a), km(r.km_b), km(r.liters_a), km(r.liters_b)]);
        }
        t
    }

    pub fn fuel_by_speed(rows: &[SpeedBinRow]) -> Self {
        let mut t = ReportTable::new(&["bin", "km", "liters", "l_per_100km"]);
        for r in rows {
            t.push(vec![r.bin.clone(), km(r.km), km(r.liters), opt(r.l_per_100km)]);
        }
        t
    }

    pub fn maintenance(rows: &[MaintenanceStatus]) -> Self {
        let mut t = ReportTable::new(&["item", "km_remaining", "state"]);
        for r in rows {
            t.push(vec![r.name.clone(), km(r.km_remaining), r.state.as_str().to_string()]);
        }
        t
    }

    pub fn mission(report: &MissionReport) -> Self {
        let mut t = ReportTable::new(&["mission", "vehicle", "driver", "km", "liters", "trips"]);
        t.push(vec![
            report.id.clone(),
            report.vehicle.clone(),
            report.driver.clone(),
            km(report.mileage_km),
            km(report.fuel_l),
            report.trips.len().to_string(),
        ]);
        t
    }

    pub fn trips(rows: &[Trip]) -> Self {
        let mut t = ReportTable::new(&[
            "vehicle", "start", "end", "km", "liters", "avg_kmh", "max_kmh", "route",
        ]);
        for r in rows {
            let route: Vec<String> = r.route_signature.iter().map(|z| z.to_string()).collect();
            t.push(vec![
                r.vehicle.clone(),
                iso8601(r.start_ms),
                iso8601(r.end_ms),
                km(r.distance_km),
                km(r.fuel_l),
                format!("{:.1}", r.avg_speed_kmh),
                format!("{:.1}", r.max_speed_kmh),
                route.join(" "),
            ]);
        }
        t
    }

    pub fn stops(rows: &[StopEvent]) -> Self {
        let mut t = ReportTable::new(&["vehicle", "start", "duration_s", "lat", "lon"]);
        for r in rows {
            t.push(vec![
                r.vehicle.clone(),
                iso8601(r.start_ms),
                format!("{:.0}", r.duration_s),
                format!("{:.6}", r.location.lat),
                format!("{:.6}", r.location.lon),
            ]);
        }
        t
    }

    pub fn nearest(result: &NearestResult) -> Self {
        let mut t = ReportTable::new(&["rank", "vehicle", "distance_m", "age_s", "stale"]);
        for (i, r) in result.ranked.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), r.vehicle.clone(), format!("{:.1}", r.distance_m), format!("{:.0}", r.age_s), "no".into()]);
        }
        for r in &result.stale {
            t.push(vec![String::new(), r.vehicle.clone(), format!("{:.1}", r.distance_m), format!("{:.0}", r.age_s), "yes".into()]);
        }
        t
    }
}
