//! Fleet ingest server.
//!
//! [`FleetServer`] owns the registry, the append-only record store, the latest-position
//! cache, alerts, commands and missions. Transports ([`net`]) and the HTTP API ([`http`])
//! are thin layers over it, and [`Connection`] is the per-session protocol state that both
//! the TCP listener and the simulator drive.

pub mod clock;
pub mod commands;
pub mod config;
pub mod events;
pub mod fleet;
pub mod http;
pub mod net;
pub mod registry;
mod reports;
pub mod session;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use commands::{Channel, CommandRecord, CommandStatus};
pub use config::{DeviceSeed, ServerConfig, ZoneDef};
pub use events::{Alert, PositionSnapshot, StreamEvent, Subscription};
pub use fleet::{FleetServer, IngestStats, MissionInput, OpenMode, ReplaySummary, SmsOut, VehicleView};
pub use net::{Listeners, LocalAddrs};
pub use registry::DeviceEntry;
pub use reports::MOVING_KMH;
pub use session::{handle_datagram, Connection};
pub use store::{AppendOutcome, PersistedRecord, Transport};

use radfleet_analytics::AnalyticsError;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("duplicate device {0}")]
    DuplicateDevice(String),
    #[error("no route to {0}: offline and SMS disabled")]
    NoRoute(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}
