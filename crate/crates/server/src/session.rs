//! Tracker protocol state for one stream connection, independent of the socket type.

use std::sync::Arc;

use log::{debug, warn};
use radfleet_core::wire::{Ack, Downlink, Imei, StreamDecoder, TextMessage, Uplink};

use crate::fleet::{FleetServer, SessionHandle};
use crate::store::Transport;

/// Feeds received bytes through the frame decoder and returns the bytes to send back.
/// The first message must be a login; frames for any other IMEI close the connection.
pub struct Connection {
    server: Arc<FleetServer>,
    decoder: StreamDecoder<Uplink>,
    transport: Transport,
    session: Option<(Imei, SessionHandle)>,
    closed: bool,
}

impl Connection {
    pub fn new(server: Arc<FleetServer>, transport: Transport) -> Self {
        Connection {
            server,
            decoder: StreamDecoder::uplink(),
            transport,
            session: None,
            closed: false,
        }
    }

    pub fn imei(&self) -> Option<Imei> {
        self.session.as_ref().map(|(i, _)| *i)
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn on_bytes(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        if self.closed {
            return out;
        }
        self.decoder.push(bytes);
        while let Some(msg) = self.decoder.next_message() {
            match msg {
                Ok(Uplink::Frame(frame)) if frame.is_login() => {
                    if self.server.login(frame.imei) {
                        self.detach();
                        let handle = self.server.attach_session(frame.imei);
                        self.session = Some((frame.imei, handle));
                        out.extend_from_slice(&Ack::LOGIN_ACCEPT.encode());
                    } else {
                        out.extend_from_slice(&Ack::LOGIN_REJECT.encode());
                        self.close();
                        break;
                    }
                }
                Ok(Uplink::Frame(frame)) => {
                    if self.imei() != Some(frame.imei) {
                        warn!("frame for {} on a session logged in as {:?}", frame.imei, self.imei());
                        self.close();
                        break;
                    }
                    match self.server.ingest(frame.imei, &frame.records, self.transport) {
                        Ok(ack) => out.extend_from_slice(&ack.encode()),
                        // No ack: the tracker retransmits.
                        Err(e) => warn!("{}: ingest failed: {e}", frame.imei),
                    }
                }
                Ok(Uplink::CommandReply(reply)) => match self.imei() {
                    Some(imei) => self.server.on_command_reply(imei, &reply),
                    None => warn!("command reply before login"),
                },
                Err(e) => debug!("dropping corrupt message: {e}"),
            }
        }
        out
    }

    /// Commands queued for this session since the last call, encoded for the wire.
    pub fn poll_commands(&mut self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some((_, handle)) = self.session.as_mut() {
            while let Ok(cmd) = handle.commands.try_recv() {
                out.extend(encode_command(cmd));
            }
        }
        out
    }

    /// Waits for the next command for this session; pending forever before login.
    pub async fn next_command(&mut self) -> Vec<u8> {
        match self.session.as_mut() {
            Some((_, handle)) => match handle.commands.recv().await {
                Some(cmd) => encode_command(cmd),
                None => std::future::pending().await,
            },
            None => std::future::pending().await,
        }
    }

    pub fn close(&mut self) {
        self.closed = true;
        self.detach();
    }

    fn detach(&mut self) {
        if let Some((imei, handle)) = self.session.take() {
            self.server.detach_session(imei, handle.id);
        }
    }
}

fn encode_command(cmd: TextMessage) -> Vec<u8> {
    Downlink::Command(cmd).encode().unwrap_or_else(|e| {
        warn!("command not encodable: {e}");
        Vec::new()
    })
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.detach();
    }
}

/// One UDP datagram holds one message. Frames carry the IMEI, so any registered, enabled
/// device may send without a login; the reply goes back to the sender.
pub fn handle_datagram(server: &FleetServer, datagram: &[u8]) -> Option<Vec<u8>> {
    match Uplink::decode(datagram) {
        Ok((Uplink::Frame(frame), _)) if frame.is_login() => {
            let ack = if server.login(frame.imei) { Ack::LOGIN_ACCEPT } else { Ack::LOGIN_REJECT };
            Some(ack.encode().to_vec())
        }
        Ok((Uplink::Frame(frame), _)) => match server.ingest(frame.imei, &frame.records, Transport::Udp) {
            Ok(ack) => Some(ack.encode().to_vec()),
            Err(e) => {
                warn!("{}: UDP ingest failed: {e}", frame.imei);
                None
            }
        },
        Ok((Uplink::CommandReply(_), _)) => None,
        Err(e) => {
            debug!("dropping datagram: {e}");
            None
        }
    }
}
