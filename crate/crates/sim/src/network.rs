//! GSM network model: coverage outages, per-message latency and UDP loss, all seeded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::SimError;

/// No coverage in `[from_ms, to_ms)` for the listed vehicles (all when `vehicles` is empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outage {
    pub from_ms: u64,
    pub to_ms: u64,
    pub vehicles: Vec<usize>,
}

impl Outage {
    pub fn covers(&self, vehicle: usize, t_ms: u64) -> bool {
        (self.from_ms..self.to_ms).contains(&t_ms) && (self.vehicles.is_empty() || self.vehicles.contains(&vehicle))
    }
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub outages: Vec<Outage>,
    pub latency_ms: (u64, u64),
    /// Chance that one UDP datagram (either direction) is lost.
    pub drop_probability: f64,
    pub sms_latency_ms: u64,
    rng: ChaCha8Rng,
}

impl NetworkModel {
    pub fn new(outages: Vec<Outage>, latency_ms: (u64, u64), drop_probability: f64, seed: u64) -> Result<Self, SimError> {
        if latency_ms.0 > latency_ms.1 {
            return Err(SimError::BadScenario(format!("latency range {latency_ms:?} is reversed")));
        }
        if !(0.0..=1.0).contains(&drop_probability) {
            return Err(SimError::BadScenario(format!("drop probability {drop_probability} outside [0, 1]")));
        }
        if let Some(o) = outages.iter().find(|o| o.to_ms < o.from_ms) {
            return Err(SimError::BadScenario(format!("outage {}..{} is reversed", o.from_ms, o.to_ms)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep the network stream apart from the trace streams (0..vehicles).
        rng.set_stream(u64::MAX);
        Ok(NetworkModel {
            outages,
            latency_ms,
            drop_probability,
            sms_latency_ms: 5_000,
            rng,
        })
    }

    /// Perfect network: no outages, fixed latency, no loss.
    pub fn ideal(latency_ms: u64) -> Self {
        Self::new(Vec::new(), (latency_ms, latency_ms), 0.0, 0).expect("valid")
    }

    pub fn has_coverage(&self, vehicle: usize, t_ms: u64) -> bool {
        !self.outages.iter().any(|o| o.covers(vehicle, t_ms))
    }

    /// End of the outage covering `t_ms`, if any.
    pub fn coverage_returns_at(&self, vehicle: usize, t_ms: u64) -> Option<u64> {
        let mut t = t_ms;
        // Back-to-back outages chain.
        while let Some(o) = self.outages.iter().find(|o| o.covers(vehicle, t)) {
            t = o.to_ms;
        }
        (t != t_ms).then_some(t)
    }

    pub fn latency(&mut self) -> u64 {
        let (lo, hi) = self.latency_ms;
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    pub fn drops_datagram(&mut self) -> bool {
        self.drop_probability > 0.0 && self.rng.random_bool(self.drop_probability)
    }
}
