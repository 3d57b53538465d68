//! Live event fan-out with bounded per-subscriber backlogs.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use radfleet_core::wire::{iso8601, Imei, TelemetryRecord};
use serde::Serialize;
use tokio::sync::mpsc;

use crate::commands::CommandRecord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionSnapshot {
    pub imei: String,
    pub vehicle: String,
    pub seq: u32,
    pub timestamp_ms: u64,
    pub time: String,
    pub lat: f64,
    pub lon: f64,
    pub speed_kmh: f64,
    pub heading_deg: f64,
    pub event: String,
    pub fix_valid: bool,
    pub ignition: bool,
    pub replay: bool,
    pub geofence_id: u16,
}

impl PositionSnapshot {
    pub fn new(imei: Imei, vehicle: &str, r: &TelemetryRecord) -> Self {
        PositionSnapshot {
            imei: imei.to_string(),
            vehicle: vehicle.to_string(),
            seq: r.seq,
            timestamp_ms: r.timestamp_ms,
            time: iso8601(r.timestamp_ms),
            lat: r.lat(),
            lon: r.lon(),
            speed_kmh: r.speed_kmh(),
            heading_deg: r.heading_deg(),
            event: r.event_code().name().to_string(),
            fix_valid: r.fix_valid(),
            ignition: r.ignition(),
            replay: r.is_replay(),
            geofence_id: r.geofence_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    pub id: u64,
    pub imei: String,
    pub vehicle: String,
    /// Event name, or "Tamper" for a conflicting duplicate.
    pub kind: String,
    pub seq: u32,
    pub timestamp_ms: u64,
    pub received_at_ms: u64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Position(PositionSnapshot),
    Alert(Alert),
    Command(CommandRecord),
    /// Last event of a subscription dropped for falling too far behind.
    Disconnected { reason: String },
}

impl StreamEvent {
    pub fn imei(&self) -> Option<&str> {
        match self {
            StreamEvent::Position(p) => Some(&p.imei),
            StreamEvent::Alert(a) => Some(&a.imei),
            StreamEvent::Command(c) => Some(&c.imei),
            StreamEvent::Disconnected { .. } => None,
        }
    }
}

pub(crate) struct Subscriber {
    tx: mpsc::Sender<StreamEvent>,
    filter: Option<Imei>,
    overflowed: Arc<AtomicBool>,
}

/// Receiving end of a live event subscription.
pub struct Subscription {
    rx: mpsc::Receiver<StreamEvent>,
    overflowed: Arc<AtomicBool>,
    done: bool,
}

impl Subscription {
    pub async fn next(&mut self) -> Option<StreamEvent> {
        if self.done {
            return None;
        }
        match self.rx.recv().await {
            Some(e) => Some(e),
            None => self.finish(),
        }
    }

    /// Non-blocking variant: `None` when nothing is queued right now or the stream ended.
    pub fn try_next(&mut self) -> Option<StreamEvent> {
        if self.done {
            return None;
        }
        match self.rx.try_recv() {
            Ok(e) => Some(e),
            Err(mpsc::error::TryRecvError::Empty) => None,
            Err(mpsc::error::TryRecvError::Disconnected) => self.finish(),
        }
    }

    fn finish(&mut self) -> Option<StreamEvent> {
        self.done = true;
        self.overflowed.load(Ordering::SeqCst).then(|| StreamEvent::Disconnected {
            reason: "backlog limit exceeded".into(),
        })
    }
}

#[derive(Default)]
pub(crate) struct Fanout {
    subscribers: Vec<Subscriber>,
}

impl Fanout {
    pub fn subscribe(&mut self, filter: Option<Imei>, backlog: usize) -> Subscription {
        let (tx, rx) = mpsc::channel(backlog);
        let overflowed = Arc::new(AtomicBool::new(false));
        self.subscribers.push(Subscriber {
            tx,
            filter,
            overflowed: overflowed.clone(),
        });
        Subscription {
            rx,
            overflowed,
            done: false,
        }
    }

    /// Never blocks: a subscriber whose backlog is full is dropped.
    pub fn publish(&mut self, imei: Imei, event: &StreamEvent) {
        self.subscribers.retain(|s| {
            if s.filter.is_some_and(|f| f != imei) {
                return !s.tx.is_closed();
            }
            match s.tx.try_send(event.clone()) {
                Ok(()) => true,
                Err(mpsc::error::TrySendError::Full(_)) => {
                    s.overflowed.store(true, Ordering::SeqCst);
                    log::warn!("dropping slow event subscriber");
                    false
                }
                Err(mpsc::error::TrySendError::Closed(_)) => false,
            }
        });
    }

    pub fn len(&self) -> usize {
        self.subscribers.len()
    }
}
