//! Scenario outcome: per-vehicle counters, oracle violations, CSV and a summary text.

use std::fmt::Write as _;
use std::io::Write;

use chrono::DateTime;
use serde::Serialize;

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleReport {
    pub vehicle: String,
    pub imei: String,
    pub produced: u64,
    pub stored: u64,
    pub buffered: u64,
    pub evicted: u64,
    pub max_buffer_bytes: u64,
    /// Priority records produced.
    pub alerts: u64,
    /// Worst time from an alert record's timestamp to its first arrival at the server.
    pub max_alert_latency_s: Option<f64>,
    pub sms_alerts: u64,
    pub commands_sent: u64,
    pub commands_acked: u64,
}

/// A failed end-to-end check, named after the oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub oracle: &'static str,
    pub detail: String,
}

impl Violation {
    pub fn new(oracle: &'static str, detail: String) -> Self {
        Violation { oracle, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub start_ms: u64,
    /// Virtual time the run stopped, including the drain after the scenario end.
    pub end_ms: u64,
    pub ticks: u64,
    pub frames: u64,
    pub duplicates: u64,
    pub vehicles: Vec<VehicleReport>,
    pub violations: Vec<Violation>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn produced(&self) -> u64 {
        self.vehicles.iter().map(|v| v.produced).sum()
    }

    pub fn stored(&self) -> u64 {
        self.vehicles.iter().map(|v| v.stored).sum()
    }

    pub fn max_buffer_bytes(&self) -> u64 {
        self.vehicles.iter().map(|v| v.max_buffer_bytes).max().unwrap_or(0)
    }

    /// `Err(OracleViolation)` naming every failed oracle.
    pub fn check(&self) -> Result<(), SimError> {
        if self.passed() {
            return Ok(());
        }
        let names: Vec<String> = self.violations.iter().map(|v| format!("{}: {}", v.oracle, v.detail)).collect();
        Err(SimError::OracleViolation(names.join("; ")))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
        for v in &self.vehicles {
            w.serialize(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn summary(&self) -> String {
        let time = |ms: u64| {
            DateTime::from_timestamp_millis(ms as i64)
                .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} (seed {})", self.name, self.seed);
        let _ = writeln!(s, "virtual time {} .. {}, {} ticks", time(self.start_ms), time(self.end_ms), self.ticks);
        let _ = writeln!(
            s,
            "vehicles {}, produced {}, stored {}, frames {}, duplicate records {}",
            self.vehicles.len(),
            self.produced(),
            self.stored(),
            self.frames,
            self.duplicates
        );
        let _ = writeln!(s, "max buffer occupancy {} bytes", self.max_buffer_bytes());
        let alerts: u64 = self.vehicles.iter().map(|v| v.alerts).sum();
        let latency = self
            .vehicles
            .iter()
            .filter_map(|v| v.max_alert_latency_s)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        match latency {
            Some(l) => {
                let _ = writeln!(s, "alerts {alerts}, max alert latency {l:.1} s");
            }
            None => {
                let _ = writeln!(s, "alerts {alerts}");
            }
        }
        if self.passed() {
            s.push_str("PASS\n");
        } else {
            for v in &self.violations {
                let _ = writeln!(s, "FAIL {}: {}", v.oracle, v.detail);
            }
        }
        s
    }
}
