//! Device registry, persisted as `registry.json`.

use std::collections::BTreeMap;
use std::path::Path;

use radfleet_core::wire::Imei;
use serde::{Deserialize, Serialize};

use crate::store::write_atomic;
use crate::ServerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub imei: String,
    pub label: String,
    pub enabled: bool,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub tank_capacity_l: Option<f64>,
    #[serde(default)]
    pub speed_limit_kmh: Option<f64>,
    pub created_at_ms: u64,
}

impl DeviceEntry {
    pub fn imei(&self) -> Imei {
        self.imei.parse().expect("registry holds validated IMEIs")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    devices: BTreeMap<Imei, DeviceEntry>,
}

pub const REGISTRY_FILE: &str = "registry.json";

impl Registry {
    pub fn load(dir: &Path) -> Result<Self, ServerError> {
        let path = dir.join(REGISTRY_FILE);
        if !path.exists() {
            return Ok(Registry::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let list: Vec<DeviceEntry> =
            serde_json::from_str(&text).map_err(|e| ServerError::Corrupt(format!("{}: {e}", path.display())))?;
        let mut devices = BTreeMap::new();
        for d in list {
            let imei: Imei = d
                .imei
                .parse()
                .map_err(|_| ServerError::Corrupt(format!("registry IMEI {}", d.imei)))?;
            devices.insert(imei, d);
        }
        Ok(Registry { devices })
    }

    pub fn save(&self, dir: &Path) -> Result<(), ServerError> {
        let list: Vec<&DeviceEntry> = self.devices.values().collect();
        let text = serde_json::to_string_pretty(&list).expect("registry serializes");
        write_atomic(&dir.join(REGISTRY_FILE), text.as_bytes())
    }

    pub fn add(&mut self, entry: DeviceEntry) -> Result<(), ServerError> {
        let imei: Imei = entry.imei.parse().map_err(|_| ServerError::BadRequest(format!("bad IMEI {}", entry.imei)))?;
        if self.devices.contains_key(&imei) {
            return Err(ServerError::DuplicateDevice(entry.imei));
        }
        if self.devices.values().any(|d| d.label == entry.label) {
            return Err(ServerError::DuplicateDevice(entry.label));
        }
        self.devices.insert(imei, DeviceEntry { imei: imei.to_string(), ..entry });
        Ok(())
    }

    pub fn get(&self, imei: Imei) -> Option<&DeviceEntry> {
        self.devices.get(&imei)
    }

    pub fn get_mut(&mut self, imei: Imei) -> Option<&mut DeviceEntry> {
        self.devices.get_mut(&imei)
    }

    /// Looks a vehicle up by IMEI or by label.
    pub fn resolve(&self, key: &str) -> Option<&DeviceEntry> {
        if let Ok(imei) = key.parse::<Imei>() {
            if let Some(d) = self.devices.get(&imei) {
                return Some(d);
            }
        }
        self.devices.values().find(|d| d.label == key)
    }

    pub fn is_enabled(&self, imei: Imei) -> bool {
        self.devices.get(&imei).is_some_and(|d| d.enabled)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceEntry> {
        self.devices.values()
    }
}
