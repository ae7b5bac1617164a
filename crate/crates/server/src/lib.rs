//! The agentstepper debug server: accepts agent and UI connections over
//! WebSocket, records trajectories, holds agents at breakpoints, snapshots
//! agent workspaces into git, and serves the web UI over HTTP on the same
//! port.

pub mod config;
pub mod hub;
pub mod pool;
pub mod store;
pub mod transport;

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info};
use thiserror::Error;

pub use config::ServerConfig;
pub use hub::{Hub, HubError, ImportError};
pub use store::{RunStore, StoreError};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error("cannot listen on {address}: {source}")]
    Bind { address: String, source: io::Error },
}

pub struct Server {
    hub: Arc<Hub>,
    listener: TcpListener,
    addr: SocketAddr,
}

impl Server {
    /// Loads stored runs and binds the listener.
    pub fn bind(config: ServerConfig) -> Result<Server, ServerError> {
        let address = format!("{}:{}", config.address, config.port);
        let hub = Hub::new(config)?;
        let listener =
            TcpListener::bind(&address).map_err(|source| ServerError::Bind { address: address.clone(), source })?;
        let addr = listener.local_addr().map_err(|source| ServerError::Bind { address, source })?;
        Ok(Server { hub, listener, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let hub = self.hub.clone();
        let addr = self.addr;
        let accept =
            thread::Builder::new().name("accept".into()).spawn(move || self.run()).expect("spawn accept thread");
        ServerHandle { hub, addr, accept: Some(accept) }
    }

    /// Serves until the hub shuts down.
    pub fn run(self) {
        info!("listening on {}", self.addr);
        if let Some(timeout) = self.hub.config().hold_timeout {
            let hub = Arc::downgrade(&self.hub);
            let tick = (timeout / 4).clamp(Duration::from_millis(5), Duration::from_millis(250));
            thread::Builder::new()
                .name("hold-timeout".into())
                .spawn(move || loop {
                    thread::sleep(tick);
                    match hub.upgrade() {
                        Some(hub) if !hub.is_shutting_down() => hub.expire_holds(timeout),
                        _ => break,
                    }
                })
                .expect("spawn hold timer");
        }
        for stream in self.listener.incoming() {
            if self.hub.is_shutting_down() {
                break;
            }
            match stream {
                Ok(stream) => {
                    let hub = self.hub.clone();
                    let spawned = thread::Builder::new()
                        .name("connection".into())
                        .spawn(move || transport::serve_connection(hub, stream));
                    if let Err(e) = spawned {
                        debug!("cannot spawn connection thread: {e}");
                    }
                }
                Err(e) => debug!("accept failed: {e}"),
            }
        }
    }
}

/// A server running on background threads; shuts down when dropped.
pub struct ServerHandle {
    hub: Arc<Hub>,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `ws://host:port/`
    pub fn url(&self) -> String {
        format!("ws://{}/", self.addr)
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Aborts live runs, releases held agents and stops accepting.
    pub fn shutdown(&mut self) {
        if let Some(accept) = self.accept.take() {
            self.hub.shutdown();
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            let _ = accept.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
