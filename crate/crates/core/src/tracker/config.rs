//! Tracker configuration and its `key=value` text form.
//!
//! Scalar keys may appear once each; `zone`, `key` and `number` repeat to build the geofence,
//! iButton and authorized-number lists. Blank lines and `#` comments are skipped.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geo::{GeofenceZone, MAX_ZONES};
use crate::wire::{Imei, RETRANSMIT_TIMEOUT_MS, MAX_SEND_ATTEMPTS};

pub const MAX_AUTHORIZED_KEYS: usize = 50;
pub const MAX_AUTHORIZED_NUMBERS: usize = 8;
/// 16 MiB of flash.
pub const DEFAULT_BUFFER_CAPACITY: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("bad value '{value}' for '{key}'")]
    BadValue { key: String, value: String },
    #[error("too many {what} (limit {limit})")]
    TooMany { what: &'static str, limit: usize },
    #[error("line {0} is not key=value")]
    BadLine(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Tcp,
    Udp,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        })
    }
}

impl FromStr for Transport {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Transport::Tcp),
            "udp" => Ok(Transport::Udp),
            _ => Err(()),
        }
    }
}

/// Harsh-driving thresholds in m/s², each of which must hold for `sustain_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcoThresholds {
    pub harsh_accel_ms2: f64,
    /// Negative: longitudinal deceleration.
    pub harsh_brake_ms2: f64,
    /// Lateral magnitude.
    pub harsh_corner_ms2: f64,
    pub sustain_ms: u64,
}

impl Default for EcoThresholds {
    fn default() -> Self {
        EcoThresholds {
            harsh_accel_ms2: 2.5,
            harsh_brake_ms2: -3.0,
            harsh_corner_ms2: 3.0,
            sustain_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub imei: Imei,
    pub time_trigger_moving_s: u64,
    pub time_trigger_stationary_s: u64,
    pub distance_trigger_m: f64,
    pub angle_trigger_deg: f64,
    pub speed_limit_kmh: f64,
    /// Non-priority records are flushed at this cadence.
    pub send_interval_s: u64,
    pub zones: Vec<GeofenceZone>,
    pub authorized_keys: Vec<u64>,
    pub authorized_numbers: Vec<String>,
    /// Where panic position SMS go; none disables them.
    pub alert_number: Option<String>,
    pub eco: EcoThresholds,
    pub t_normal_s: u64,
    pub t_deep_s: u64,
    /// Engine on and stationary this long switches Active to Idle.
    pub idle_after_s: u64,
    pub server: String,
    pub transport: Transport,
    pub retransmit_timeout_ms: u64,
    pub max_send_attempts: u32,
    pub buffer_capacity_bytes: usize,
}

impl TrackerConfig {
    pub fn new(imei: Imei) -> Self {
        TrackerConfig {
            imei,
            time_trigger_moving_s: 60,
            time_trigger_stationary_s: 300,
            distance_trigger_m: 200.0,
            angle_trigger_deg: 10.0,
            speed_limit_kmh: 90.0,
            send_interval_s: 60,
            zones: Vec::new(),
            authorized_keys: Vec::new(),
            authorized_numbers: Vec::new(),
            alert_number: None,
            eco: EcoThresholds::default(),
            t_normal_s: 300,
            t_deep_s: 3_600,
            idle_after_s: 60,
            server: "127.0.0.1:5027".to_string(),
            transport: Transport::Tcp,
            retransmit_timeout_ms: RETRANSMIT_TIMEOUT_MS,
            max_send_attempts: MAX_SEND_ATTEMPTS,
            buffer_capacity_bytes: DEFAULT_BUFFER_CAPACITY,
        }
    }

    /// Parse the `key=value` text form. `imei` is required.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut imei = None;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine(n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "imei" {
                imei = Some(value.parse::<Imei>().map_err(|_| bad(key, value))?);
            } else {
                pairs.push((key, value));
            }
        }
        let imei = imei.ok_or_else(|| ConfigError::UnknownParam("imei (missing)".into()))?;
        let mut config = TrackerConfig::new(imei);
        for (key, value) in pairs {
            match key {
                "zone" => config.add_zone(value.parse().map_err(|_| bad(key, value))?)?,
                "key" => config.add_key(parse_key(value).ok_or_else(|| bad(key, value))?)?,
                "number" => config.add_number(value)?,
                _ => config.set_param(key, value)?,
            }
        }
        Ok(config)
    }

    pub fn add_zone(&mut self, zone: GeofenceZone) -> Result<(), ConfigError> {
        if self.zones.len() >= MAX_ZONES {
            return Err(ConfigError::TooMany {
                what: "geofence zones",
                limit: MAX_ZONES,
            });
        }
        self.zones.push(zone);
        Ok(())
    }

    pub fn add_key(&mut self, key: u64) -> Result<(), ConfigError> {
        if self.authorized_keys.len() >= MAX_AUTHORIZED_KEYS {
            return Err(ConfigError::TooMany {
                what: "iButton keys",
                limit: MAX_AUTHORIZED_KEYS,
            });
        }
        self.authorized_keys.push(key);
        Ok(())
    }

    pub fn add_number(&mut self, number: &str) -> Result<(), ConfigError> {
        if self.authorized_numbers.len() >= MAX_AUTHORIZED_NUMBERS {
            return Err(ConfigError::TooMany {
                what: "authorized numbers",
                limit: MAX_AUTHORIZED_NUMBERS,
            });
        }
        if !valid_number(number) {
            return Err(bad("number", number));
        }
        self.authorized_numbers.push(number.to_string());
        Ok(())
    }

    /// Set one scalar parameter by name.
    pub fn set_param(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = || bad(key, value);
        let secs = || value.parse::<u64>().ok().filter(|v| *v > 0).ok_or_else(err);
        let positive = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(err)
        };
        match key {
            "time_trigger_moving" => self.time_trigger_moving_s = secs()?,
            "time_trigger_stationary" => self.time_trigger_stationary_s = secs()?,
            "distance_trigger" => self.distance_trigger_m = positive()?,
            "angle_trigger" => {
                let v = positive()?;
                if v > 180.0 {
                    return Err(err());
                }
                self.angle_trigger_deg = v;
            }
            "speed_limit" => self.speed_limit_kmh = positive()?,
            "send_interval" => self.send_interval_s = secs()?,
            "t_normal" => self.t_normal_s = secs()?,
            "t_deep" => self.t_deep_s = secs()?,
            "idle_after" => self.idle_after_s = secs()?,
            "harsh_accel" => self.eco.harsh_accel_ms2 = positive()?,
            "harsh_brake" => {
                let v: f64 = value.parse().map_err(|_| err())?;
                if !(v.is_finite() && v < 0.0) {
                    return Err(err());
                }
                self.eco.harsh_brake_ms2 = v;
            }
            "harsh_corner" => self.eco.harsh_corner_ms2 = positive()?,
            "eco_sustain_ms" => self.eco.sustain_ms = secs()?,
            "server" => {
                if value.is_empty() || value.contains(char::is_whitespace) {
                    return Err(err());
                }
                self.server = value.to_string();
            }
            "transport" => self.transport = value.parse().map_err(|_| err())?,
            "alert_number" => {
                if !valid_number(value) {
                    return Err(err());
                }
                self.alert_number = Some(value.to_string());
            }
            "retransmit_timeout_ms" => self.retransmit_timeout_ms = secs()?,
            "max_send_attempts" => {
                self.max_send_attempts = value.parse().ok().filter(|v| *v > 0).ok_or_else(err)?
            }
            "buffer_capacity" => {
                let v: usize = value.parse().map_err(|_| err())?;
                if v < crate::wire::RECORD_LEN {
                    return Err(err());
                }
                self.buffer_capacity_bytes = v;
            }
            _ => return Err(ConfigError::UnknownParam(key.to_string())),
        }
        Ok(())
    }

    /// Render the scalar parameters and lists back into the text form.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "imei={}\ntime_trigger_moving={}\ntime_trigger_stationary={}\ndistance_trigger={}\n\
             angle_trigger={}\nspeed_limit={}\nsend_interval={}\nt_normal={}\nt_deep={}\n\
             idle_after={}\nharsh_accel={}\nharsh_brake={}\nharsh_corner={}\neco_sustain_ms={}\n\
             server={}\ntransport={}\nretransmit_timeout_ms={}\nmax_send_attempts={}\n\
             buffer_capacity={}\n",
            self.imei,
            self.time_trigger_moving_s,
            self.time_trigger_stationary_s,
            self.distance_trigger_m,
            self.angle_trigger_deg,
            self.speed_limit_kmh,
            self.send_interval_s,
            self.t_normal_s,
            self.t_deep_s,
            self.idle_after_s,
            self.eco.harsh_accel_ms2,
            self.eco.harsh_brake_ms2,
            self.eco.harsh_corner_ms2,
            self.eco.sustain_ms,
            self.server,
            self.transport,
            self.retransmit_timeout_ms,
            self.max_send_attempts,
            self.buffer_capacity_bytes,
        );
        if let Some(n) = &self.alert_number {
            out.push_str(&format!("alert_number={n}\n"));
        }
        for z in &self.zones {
            out.push_str(&format!("zone={z}\n"));
        }
        for k in &self.authorized_keys {
            out.push_str(&format!("key={k:016X}\n"));
        }
        for n in &self.authorized_numbers {
            out.push_str(&format!("number={n}\n"));
        }
        out
    }
}

fn bad(key: &str, value: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    }
}

/// iButton ids are written as 16 hex digits.
fn parse_key(value: &str) -> Option<u64> {
    if value.len() != 16 {
        return None;
    }
    u64::from_str_radix(value, 16).ok()
}

fn valid_number(n: &str) -> bool {
    let digits = n.strip_prefix('+').unwrap_or(n);
    (3..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit())
}
