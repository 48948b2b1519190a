//! WebSocket server for the workbench.
//!
//! One simulation thread owns the workspace and ticks it at 1 kHz. Each
//! connection runs one task that reads command frames in order, forwards them
//! to the simulation mailbox and writes exactly one ack per command before
//! reading the next, so commands from one connection apply in send order.
//! Subscribed connections also receive the scene description once, every
//! engine event, and the latest snapshot whenever it changes; a slow client
//! skips intermediate snapshots but never acks.

pub mod engine;
pub mod protocol;

use std::net::SocketAddr;
use std::path::PathBuf;

use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast::error::RecvError;
use tokio_tungstenite::tungstenite::Message;
use workbench_core::workspace::{Workspace, WorkspaceError};

use engine::{ArtifactStore, Engine, SimHandle};
use protocol::{codes, Command, CommandError, Envelope};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8765";
pub const DEFAULT_DATA_DIR: &str = "workbench-data";
pub const DEFAULT_BROADCAST_HZ: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub addr: String,
    pub data_dir: PathBuf,
    pub scene: Option<PathBuf>,
    pub broadcast_hz: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { addr: DEFAULT_ADDR.into(), data_dir: DEFAULT_DATA_DIR.into(), scene: None, broadcast_hz: DEFAULT_BROADCAST_HZ }
    }
}

impl ServerConfig {
    /// Defaults overridden by `WORKBENCH_ADDR`, `WORKBENCH_DATA` and
    /// `WORKBENCH_SCENE`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(a) = std::env::var("WORKBENCH_ADDR") {
            c.addr = a;
        }
        if let Ok(d) = std::env::var("WORKBENCH_DATA") {
            c.data_dir = d.into();
        }
        if let Ok(s) = std::env::var("WORKBENCH_SCENE") {
            c.scene = Some(s.into());
        }
        c
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error(transparent)]
    Scene(#[from] WorkspaceError),
    #[error("data directory {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },
}

pub struct Server {
    local_addr: SocketAddr,
    sim: SimHandle,
    accept: tokio::task::JoinHandle<()>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn sim(&self) -> &SimHandle {
        &self.sim
    }

    pub fn shutdown(self) {
        self.accept.abort();
        self.sim.stop();
    }
}

/// Load the scene, start the simulation thread and accept connections.
pub async fn serve(config: &ServerConfig) -> Result<Server, ServerError> {
    let workspace = match &config.scene {
        Some(path) => Workspace::load_scene(path)?,
        None => Workspace::default(),
    };
    let store = ArtifactStore::open(&config.data_dir).map_err(|source| ServerError::DataDir { path: config.data_dir.clone(), source })?;
    let listener = TcpListener::bind(&config.addr).await.map_err(|source| ServerError::BindFailure { addr: config.addr.clone(), source })?;
    let local_addr = listener.local_addr().map_err(|source| ServerError::BindFailure { addr: config.addr.clone(), source })?;
    let sim = engine::spawn(Engine::new(workspace, store), config.broadcast_hz);
    let accept_sim = sim.clone();
    let accept = tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            tokio::spawn(connection(stream, accept_sim.clone()));
        }
    });
    Ok(Server { local_addr, sim, accept })
}

enum Inbound {
    Command { id: String, command: Result<Command, CommandError> },
    Broken(CommandError),
}

fn parse_frame(text: &str) -> Inbound {
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Inbound::Broken(CommandError::new(codes::MALFORMED_FRAME, e.to_string())),
    };
    match serde_json::from_value::<Envelope>(value) {
        Ok(env) => Inbound::Command { command: Command::decode(&env), id: env.id },
        Err(e) => Inbound::Broken(CommandError::new(codes::MALFORMED_FRAME, e.to_string())),
    }
}

async fn connection(stream: TcpStream, sim: SimHandle) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else { return };
    let (mut sink, mut source) = ws.split();
    let mut snapshots = sim.snapshots.clone();
    let mut events = sim.events.subscribe();
    let mut subscribed = false;
    let mut last_tick = None;

    loop {
        let outgoing: Vec<String> = tokio::select! {
            frame = source.next() => match frame {
                Some(Ok(Message::Text(text))) => match parse_frame(text.as_str()) {
                    Inbound::Broken(e) => vec![protocol::error_frame(&e)],
                    Inbound::Command { id, command } => {
                        let subscribe = matches!(command, Ok(Command::Subscribe));
                        let unsubscribe = matches!(command, Ok(Command::Unsubscribe));
                        let outcome = match command {
                            Ok(c) => sim.request(c).await,
                            Err(e) => Err(e),
                        };
                        let mut out = vec![protocol::ack(&id, &outcome)];
                        if outcome.is_ok() && subscribe && !subscribed {
                            subscribed = true;
                            events = events.resubscribe();
                            out.push(sim.scene.to_string());
                            let snap = snapshots.borrow_and_update().clone();
                            last_tick = Some(snap.tick);
                            out.push(snap.frame.to_string());
                        } else if outcome.is_ok() && unsubscribe {
                            subscribed = false;
                        }
                        out
                    }
                },
                Some(Ok(Message::Binary(_))) => {
                    vec![protocol::error_frame(&CommandError::new(codes::MALFORMED_FRAME, "binary frames are not supported"))]
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            changed = snapshots.changed(), if subscribed => {
                if changed.is_err() {
                    break;
                }
                let snap = snapshots.borrow_and_update().clone();
                if last_tick.is_some_and(|t| snap.tick <= t) {
                    continue;
                }
                last_tick = Some(snap.tick);
                vec![snap.frame.to_string()]
            },
            event = events.recv(), if subscribed => match event {
                Ok(frame) => vec![frame.to_string()],
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => break,
            },
        };
        for frame in outgoing {
            if sink.send(Message::text(frame)).await.is_err() {
                return;
            }
        }
    }
    let _ = sink.close().await;
}
