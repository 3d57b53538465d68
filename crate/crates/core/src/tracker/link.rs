//! GPRS session handling: login, stop-and-wait frame delivery with retransmission, and
//! replay marking while the link is down.

use log::{debug, warn};

use super::buffer::RecordBuffer;
use crate::tracker::config::TrackerConfig;
use crate::wire::{encode_frame, encode_login, Ack, MAX_RECORDS_PER_FRAME};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Session {
    Offline,
    LoggingIn { sent_at_ms: u64, attempts: u32 },
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InFlight {
    seqs: Vec<u32>,
    bytes: Vec<u8>,
    sent_at_ms: u64,
    attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    session: Session,
    in_flight: Option<InFlight>,
    last_flush_ms: Option<u64>,
    /// No new frame goes out before this time. After a retransmission a late ack for the
    /// earlier copy may still arrive; acks carry no frame id, so it must not meet a new frame.
    quiet_until_ms: u64,
    /// Earliest time for the next login attempt after a rejection or exhausted retries.
    next_login_ms: u64,
    urgent: bool,
    draining: bool,
}

impl Default for Link {
    fn default() -> Self {
        Link {
            session: Session::Offline,
            in_flight: None,
            last_flush_ms: None,
            quiet_until_ms: 0,
            next_login_ms: 0,
            urgent: false,
            draining: false,
        }
    }
}

impl Link {
    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn is_online(&self) -> bool {
        self.session == Session::Online
    }

    pub fn frame_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Ask for a flush at the next service call regardless of cadence.
    pub fn request_flush(&mut self) {
        self.urgent = true;
    }

    fn go_offline(&mut self, buffer: &mut RecordBuffer) {
        if self.session != Session::Offline {
            debug!("link down");
        }
        self.session = Session::Offline;
        self.in_flight = None;
        self.draining = false;
        buffer.mark_replay();
    }

    /// Run the link for one tick. `modem_ok` is false when there is no usable GSM coverage or
    /// the modem is powered down; every record buffered meanwhile is flagged as a replay.
    pub fn service(
        &mut self,
        buffer: &mut RecordBuffer,
        config: &TrackerConfig,
        now_ms: u64,
        modem_ok: bool,
    ) -> Vec<Vec<u8>> {
        if !modem_ok {
            self.go_offline(buffer);
            return Vec::new();
        }
        let timeout = config.retransmit_timeout_ms;
        let max_attempts = config.max_send_attempts.max(1);
        match self.session {
            Session::Offline => {
                if now_ms < self.next_login_ms {
                    buffer.mark_replay();
                    return Vec::new();
                }
                self.session = Session::LoggingIn {
                    sent_at_ms: now_ms,
                    attempts: 1,
                };
                vec![encode_login(config.imei)]
            }
            Session::LoggingIn {
                sent_at_ms,
                attempts,
            } => {
                if now_ms - sent_at_ms < timeout {
                    return Vec::new();
                }
                if attempts >= max_attempts {
                    warn!("login unanswered after {attempts} attempts");
                    self.session = Session::Offline;
                    self.next_login_ms = now_ms + timeout;
                    return Vec::new();
                }
                self.session = Session::LoggingIn {
                    sent_at_ms: now_ms,
                    attempts: attempts + 1,
                };
                self.quiet_until_ms = now_ms + timeout;
                vec![encode_login(config.imei)]
            }
            Session::Online => self.service_online(buffer, config, now_ms),
        }
    }

    fn service_online(
        &mut self,
        buffer: &mut RecordBuffer,
        config: &TrackerConfig,
        now_ms: u64,
    ) -> Vec<Vec<u8>> {
        let timeout = config.retransmit_timeout_ms;
        if let Some(flight) = &mut self.in_flight {
            if now_ms - flight.sent_at_ms < timeout {
                return Vec::new();
            }
            if flight.attempts >= config.max_send_attempts.max(1) {
                warn!(
                    "frame with {} records unacknowledged after {} attempts, keeping it buffered",
                    flight.seqs.len(),
                    flight.attempts
                );
                self.go_offline(buffer);
                self.next_login_ms = now_ms + timeout;
                return Vec::new();
            }
            flight.attempts += 1;
            flight.sent_at_ms = now_ms;
            self.quiet_until_ms = now_ms + timeout;
            return vec![flight.bytes.clone()];
        }
        if now_ms < self.quiet_until_ms || buffer.is_empty() {
            return Vec::new();
        }
        let cadence_due = self
            .last_flush_ms
            .is_none_or(|last| now_ms - last >= config.send_interval_s * 1000);
        if !(self.urgent || self.draining || cadence_due) {
            return Vec::new();
        }
        let batch = buffer.take_batch(MAX_RECORDS_PER_FRAME);
        let bytes = encode_frame(config.imei, &batch).expect("batch respects the frame cap");
        self.in_flight = Some(InFlight {
            seqs: batch.iter().map(|r| r.seq).collect(),
            bytes: bytes.clone(),
            sent_at_ms: now_ms,
            attempts: 1,
        });
        self.last_flush_ms = Some(now_ms);
        self.urgent = false;
        vec![bytes]
    }

    /// Handle an ack. Returns the number of records released from the buffer.
    pub fn on_ack(&mut self, ack: Ack, buffer: &mut RecordBuffer, now_ms: u64) -> usize {
        match self.session {
            Session::Offline => 0,
            Session::LoggingIn { .. } => {
                if ack == Ack::LOGIN_ACCEPT {
                    debug!("login accepted");
                    self.session = Session::Online;
                    self.draining = !buffer.is_empty();
                } else {
                    warn!("login rejected");
                    self.session = Session::Offline;
                    self.next_login_ms = now_ms + 60_000;
                }
                0
            }
            Session::Online => {
                let Some(flight) = self.in_flight.take() else {
                    debug!("ignoring ack with no frame in flight");
                    return 0;
                };
                let accepted = usize::from(ack.accepted_count).min(flight.seqs.len());
                let removed = buffer.acknowledge(&flight.seqs[..accepted]);
                self.draining = !buffer.is_empty();
                removed
            }
        }
    }
}
