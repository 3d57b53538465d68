//! Tracker-side building blocks shared by the server, simulator and CLI.

pub mod geo;
pub mod nmea;
pub mod tracker;
pub mod wire;
