//! Socket listeners: tracker TCP sessions, UDP datagrams and the HTTP API.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use log::{debug, info, warn};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};

use crate::config::ServerConfig;
use crate::fleet::FleetServer;
use crate::session::{handle_datagram, Connection};
use crate::store::Transport;
use crate::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalAddrs {
    pub tcp: SocketAddr,
    pub udp: SocketAddr,
    pub http: SocketAddr,
}

/// Bound sockets. Binding is separate from running so port 0 can be resolved first.
pub struct Listeners {
    tcp: TcpListener,
    udp: UdpSocket,
    http: TcpListener,
}

impl Listeners {
    pub async fn bind(config: &ServerConfig) -> Result<Self, ServerError> {
        Ok(Listeners {
            tcp: TcpListener::bind(config.tcp_listen).await?,
            udp: UdpSocket::bind(config.udp_listen).await?,
            http: TcpListener::bind(config.http_listen).await?,
        })
    }

    pub fn local_addrs(&self) -> Result<LocalAddrs, ServerError> {
        Ok(LocalAddrs {
            tcp: self.tcp.local_addr()?,
            udp: self.udp.local_addr()?,
            http: self.http.local_addr()?,
        })
    }

    /// Serves until `shutdown` resolves or a listener fails.
    pub async fn run(self, server: Arc<FleetServer>, shutdown: impl Future<Output = ()>) -> Result<(), ServerError> {
        let app = crate::http::router(server.clone());
        let http = async move { axum::serve(self.http, app).await.map_err(ServerError::from) };
        tokio::select! {
            r = accept_tcp(self.tcp, server.clone()) => r,
            r = serve_udp(self.udp, server) => r,
            r = http => r,
            _ = shutdown => {
                info!("shutting down");
                Ok(())
            }
        }
    }
}

async fn accept_tcp(listener: TcpListener, server: Arc<FleetServer>) -> Result<(), ServerError> {
    loop {
        let (sock, peer) = listener.accept().await?;
        debug!("tcp connection from {peer}");
        let server = server.clone();
        tokio::spawn(async move {
            if let Err(e) = tcp_session(sock, server).await {
                debug!("{peer}: {e}");
            }
            debug!("{peer} closed");
        });
    }
}

async fn tcp_session(mut sock: TcpStream, server: Arc<FleetServer>) -> std::io::Result<()> {
    sock.set_nodelay(true)?;
    let mut conn = Connection::new(server, Transport::Tcp);
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        tokio::select! {
            n = sock.read(&mut buf) => {
                let n = n?;
                if n == 0 {
                    return Ok(());
                }
                let out = conn.on_bytes(&buf[..n]);
                if !out.is_empty() {
                    sock.write_all(&out).await?;
                }
                if conn.is_closed() {
                    return Ok(());
                }
            }
            cmd = conn.next_command() => {
                if !cmd.is_empty() {
                    sock.write_all(&cmd).await?;
                }
            }
        }
    }
}

async fn serve_udp(sock: UdpSocket, server: Arc<FleetServer>) -> Result<(), ServerError> {
    let mut buf = vec![0u8; 65_536];
    loop {
        let (n, peer) = sock.recv_from(&mut buf).await?;
        if let Some(reply) = handle_datagram(&server, &buf[..n]) {
            if let Err(e) = sock.send_to(&reply, peer).await {
                warn!("udp reply to {peer}: {e}");
            }
        }
    }
}
