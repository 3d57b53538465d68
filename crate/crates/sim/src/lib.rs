//! Scenario engine for end-to-end runs: synthetic vehicle traces, a seeded GSM network and
//! real trackers talking to an in-process server, all on one virtual clock.

pub mod engine;
pub mod network;
pub mod report;
pub mod route;
pub mod scenario;
pub mod trace;

use thiserror::Error;

pub use engine::{run_scenario, ScenarioRun, ALERT_NUMBER, SERVER_NUMBER};
pub use network::{NetworkModel, Outage};
pub use report::{ScenarioReport, VehicleReport, Violation};
pub use route::{FuelModel, Injection, RouteScript, Waypoint};
pub use scenario::{CommandInjection, NetworkSpec, Scenario, VehicleSpec};
pub use trace::{generate_trace, trace_samples, RouteSim, Sample};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("oracle violation: {0}")]
    OracleViolation(String),
    #[error("tracker: {0}")]
    Tracker(#[from] radfleet_core::tracker::TrackerError),
    #[error(transparent)]
    Server(#[from] radfleet_server::ServerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
