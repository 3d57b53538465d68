//! Consumables schedule: engine oil, brake fluid, spark plugs, belts.

use serde::{Deserialize, Serialize};

use crate::AnalyticsError;

pub const DEFAULT_WARN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Scope {
    Vehicle(String),
    Class(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceItem {
    pub name: String,
    pub scope: Scope,
    pub interval_km: f64,
    pub last_service_odometer_km: f64,
    #[serde(default = "default_warn")]
    pub warn_fraction: f64,
}

fn default_warn() -> f64 {
    DEFAULT_WARN_FRACTION
}

impl MaintenanceItem {
    pub fn new(name: &str, scope: Scope, interval_km: f64, last_service_odometer_km: f64) -> Result<Self, AnalyticsError> {
        let item = MaintenanceItem {
            name: name.to_string(),
            scope,
            interval_km,
            last_service_odometer_km,
            warn_fraction: DEFAULT_WARN_FRACTION,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.interval_km > 0.0 && self.interval_km.is_finite() {
            Ok(())
        } else {
            Err(AnalyticsError::BadInterval)
        }
    }

    pub fn status(&self, odometer_km: f64) -> MaintenanceStatus {
        let used = odometer_km - self.last_service_odometer_km;
        let state = if used >= self.interval_km {
            MaintenanceState::Due
        } else if used >= self.warn_fraction * self.interval_km {
            MaintenanceState::Warn
        } else {
            MaintenanceState::Ok
        };
        MaintenanceStatus {
            name: self.name.clone(),
            km_remaining: self.interval_km - used,
            state,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaintenanceState {
    #[serde(rename = "OK")]
    Ok,
    Warn,
    Due,
}

impl MaintenanceState {
    pub fn as_str(self) -> &'static str {
        match self {
            MaintenanceState::Ok => "OK",
            MaintenanceState::Warn => "Warn",
            MaintenanceState::Due => "Due",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaintenanceStatus {
    pub name: String,
    pub km_remaining: f64,
    pub state: MaintenanceState,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaintenancePlan {
    pub items: Vec<MaintenanceItem>,
}

impl MaintenancePlan {
    pub fn add(&mut self, item: MaintenanceItem) -> Result<(), AnalyticsError> {
        item.validate()?;
        self.items.push(item);
        Ok(())
    }

    /// Items that apply to `vehicle`: its own items, plus class items whose name it does not
    /// override. Sorted by name.
    pub fn applicable(&self, vehicle: &str, class: Option<&str>) -> Vec<&MaintenanceItem> {
        let own: Vec<&MaintenanceItem> = self
            .items
            .iter()
            .filter(|i| i.scope == Scope::Vehicle(vehicle.to_string()))
            .collect();
        let mut out = own.clone();
        if let Some(class) = class {
            out.extend(self.items.iter().filter(|i| {
                i.scope == Scope::Class(class.to_string()) && !own.iter().any(|o| o.name == i.name)
            }));
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }
}

pub fn maintenance_due(plan: &MaintenancePlan, vehicle: &str, class: Option<&str>, odometer_km: f64) -> Vec<MaintenanceStatus> {
    plan.applicable(vehicle, class)
        .into_iter()
        .map(|i| i.status(odometer_km))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_interval_rejected() {
        assert_eq!(
            MaintenanceItem::new("oil", Scope::Class("van".into()), 0.0, 0.0),
            Err(AnalyticsError::BadInterval)
        );
    }
}
