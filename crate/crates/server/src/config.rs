//! Server configuration file (TOML).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use radfleet_analytics::{FleetCalendar, MaintenanceItem};
use radfleet_core::geo::{GeoError, GeoPoint, GeofenceZone};
use serde::{Deserialize, Serialize};

use crate::ServerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub tcp_listen: SocketAddr,
    pub udp_listen: SocketAddr,
    pub http_listen: SocketAddr,
    /// Deliver commands to offline devices over the simulated SMS channel.
    pub sms_simulation: bool,
    /// Fleet-local offset from UTC used for day boundaries in reports.
    pub utc_offset_minutes: i32,
    /// fsync the record log before acknowledging a frame.
    pub fsync: bool,
    pub subscriber_backlog: usize,
    pub stale_after_s: f64,
    pub default_tank_capacity_l: f64,
    /// Registry seed: devices added on startup when missing.
    pub devices: Vec<DeviceSeed>,
    pub zones: Vec<ZoneDef>,
    pub maintenance: Vec<MaintenanceItem>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            data_dir: PathBuf::from("radfleet-data"),
            tcp_listen: ([0, 0, 0, 0], radfleet_core::wire::DEFAULT_TCP_PORT).into(),
            udp_listen: ([0, 0, 0, 0], radfleet_core::wire::DEFAULT_UDP_PORT).into(),
            http_listen: ([127, 0, 0, 1], 8080).into(),
            sms_simulation: true,
            utc_offset_minutes: 210,
            fsync: true,
            subscriber_backlog: 1000,
            stale_after_s: radfleet_analytics::DEFAULT_STALENESS_S,
            default_tank_capacity_l: 60.0,
            devices: Vec::new(),
            zones: Vec::new(),
            maintenance: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSeed {
    pub imei: String,
    pub label: String,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub tank_capacity_l: Option<f64>,
    #[serde(default)]
    pub speed_limit_kmh: Option<f64>,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZoneDef {
    Rectangle { id: u16, sw: [f64; 2], ne: [f64; 2] },
    Circle { id: u16, center: [f64; 2], radius_m: f64 },
    Triangle { id: u16, vertices: [[f64; 2]; 3] },
}

impl ZoneDef {
    pub fn build(&self) -> Result<GeofenceZone, GeoError> {
        let p = |c: [f64; 2]| GeoPoint::new(c[0], c[1]);
        match self {
            ZoneDef::Rectangle { id, sw, ne } => GeofenceZone::rectangle(*id, p(*sw)?, p(*ne)?),
            ZoneDef::Circle { id, center, radius_m } => GeofenceZone::circle(*id, p(*center)?, *radius_m),
            ZoneDef::Triangle { id, vertices } => {
                GeofenceZone::triangle(*id, p(vertices[0])?, p(vertices[1])?, p(vertices[2])?)
            }
        }
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        // A relative data directory is taken relative to the config file.
        if config.data_dir.is_relative() {
            if let Some(dir) = path.parent() {
                config.data_dir = dir.join(&config.data_dir);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ServerError> {
        let config: ServerConfig = toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        for z in &self.zones {
            z.build().map_err(|e| ServerError::Config(format!("zone: {e}")))?;
        }
        for m in &self.maintenance {
            m.validate().map_err(|e| ServerError::Config(format!("maintenance item {}: {e}", m.name)))?;
        }
        if self.calendar().is_none() {
            return Err(ServerError::Config(format!("utc_offset_minutes {} out of range", self.utc_offset_minutes)));
        }
        if self.subscriber_backlog == 0 {
            return Err(ServerError::Config("subscriber_backlog must be positive".into()));
        }
        Ok(())
    }

    pub fn calendar(&self) -> Option<FleetCalendar> {
        FleetCalendar::from_offset_minutes(self.utc_offset_minutes)
    }

    pub fn zones(&self) -> Vec<GeofenceZone> {
        self.zones.iter().filter_map(|z| z.build().ok()).collect()
    }
}
