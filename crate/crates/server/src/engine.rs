//! The simulation side of the server: the workspace, the artifact store and
//! the 1 kHz loop that owns them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot, watch};
use workbench_core::dmp::{self, DmpModel};
use workbench_core::trajectory::{self, Trajectory};
use workbench_core::workspace::{Workspace, WorkspaceError};

use crate::protocol::{codes, Command, CommandError, TrajectoryWire};

pub fn workspace_code(e: &WorkspaceError) -> &'static str {
    match e {
        WorkspaceError::Urdf(_) => "urdf_error",
        WorkspaceError::DuplicateId(_) => "duplicate_id",
        WorkspaceError::MalformedScene(_) => "malformed_scene",
        WorkspaceError::UnknownRobot(_) => "unknown_robot",
        WorkspaceError::IndexOutOfRange { .. } => "index_out_of_range",
        WorkspaceError::WrongMode { .. } => "wrong_mode",
        WorkspaceError::Unreachable(_) => "unreachable",
        WorkspaceError::BusyRobot(_) => "busy_robot",
        WorkspaceError::AlreadyRecording(_) => "already_recording",
        WorkspaceError::NotRecording(_) => "not_recording",
        WorkspaceError::NonFiniteState { .. } => "non_finite_state",
        WorkspaceError::DimensionMismatch { .. } | WorkspaceError::EmptyProgram | WorkspaceError::Trajectory(_) => codes::VALIDATION,
        WorkspaceError::Kinematics(_) => "kinematics_error",
        WorkspaceError::Io(_) => codes::IO,
    }
}

impl From<WorkspaceError> for CommandError {
    fn from(e: WorkspaceError) -> Self {
        CommandError::new(workspace_code(&e), e.to_string())
    }
}

/// Trajectories and DMP models by id, stored as `<data_dir>/<id>.traj.jsonl`
/// and `<data_dir>/<id>.dmp.json`.
pub struct ArtifactStore {
    dir: PathBuf,
    next: u64,
}

const TRAJ_EXT: &str = ".traj.jsonl";
const MODEL_EXT: &str = ".dmp.json";

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        // continue numbering after whatever is already on disk
        let mut next = 1;
        for entry in std::fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            let n = name.split(['-', '.']).nth(1).and_then(|n| n.parse::<u64>().ok());
            if let Some(n) = n {
                next = next.max(n + 1);
            }
        }
        Ok(Self { dir, next })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn fresh_id(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}-{}", self.next);
        self.next += 1;
        id
    }

    fn path(&self, id: &str, ext: &str) -> Result<PathBuf, CommandError> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(CommandError::new(codes::VALIDATION, format!("invalid artifact id `{id}`")));
        }
        Ok(self.dir.join(format!("{id}{ext}")))
    }

    pub fn put_trajectory(&mut self, traj: &Trajectory) -> Result<String, CommandError> {
        let id = self.fresh_id("traj");
        trajectory::save_file(traj, self.path(&id, TRAJ_EXT)?).map_err(|e| CommandError::new(codes::IO, e.to_string()))?;
        Ok(id)
    }

    pub fn trajectory(&self, id: &str) -> Result<Trajectory, CommandError> {
        let path = self.path(id, TRAJ_EXT)?;
        if !path.exists() {
            return Err(CommandError::new(codes::NOT_FOUND, format!("no trajectory `{id}`")));
        }
        trajectory::load_file(path).map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))
    }

    pub fn put_model(&mut self, model: &DmpModel) -> Result<String, CommandError> {
        let id = self.fresh_id("dmp");
        std::fs::write(self.path(&id, MODEL_EXT)?, model.to_json()).map_err(|e| CommandError::new(codes::IO, e.to_string()))?;
        Ok(id)
    }

    pub fn model(&self, id: &str) -> Result<DmpModel, CommandError> {
        let path = self.path(id, MODEL_EXT)?;
        let text = std::fs::read_to_string(&path).map_err(|_| CommandError::new(codes::NOT_FOUND, format!("no model `{id}`")))?;
        DmpModel::from_json(&text).map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))
    }

    pub fn list(&self) -> Result<(Vec<String>, Vec<String>), CommandError> {
        let io = |e: std::io::Error| CommandError::new(codes::IO, e.to_string());
        let (mut trajs, mut models) = (Vec::new(), Vec::new());
        for entry in std::fs::read_dir(&self.dir).map_err(io)? {
            let name = entry.map_err(io)?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(TRAJ_EXT) {
                trajs.push(id.to_owned());
            } else if let Some(id) = name.strip_suffix(MODEL_EXT) {
                models.push(id.to_owned());
            }
        }
        trajs.sort();
        models.sort();
        Ok((trajs, models))
    }
}

pub struct Engine {
    pub workspace: Workspace,
    pub store: ArtifactStore,
}

impl Engine {
    pub fn new(workspace: Workspace, store: ArtifactStore) -> Self {
        Self { workspace, store }
    }

    /// Apply one command between ticks. Subscription commands belong to the
    /// connection and are acknowledged here without effect.
    pub fn apply(&mut self, command: Command) -> Result<Value, CommandError> {
        let ws = &mut self.workspace;
        Ok(match command {
            Command::Subscribe | Command::Unsubscribe => json!({}),
            Command::SetMode { robot, mode } => {
                ws.set_mode(&robot, mode)?;
                json!({})
            }
            Command::DragJoint { robot, joint, target } => json!({ "applied": ws.drag_joint(&robot, joint, target)? }),
            Command::DragEe { robot, pose } => {
                let r = ws.drag_ee(&robot, &pose.to_pose())?;
                json!({ "q": r.q, "residual": r.residual, "iterations": r.iterations })
            }
            Command::CommitGhost { robot } => json!({ "handle": ws.commit_ghost(&robot)? }),
            Command::SetGripper { robot, state } => json!({ "attached": ws.set_gripper(&robot, state)? }),
            Command::RunProgram { robot, program } => json!({ "handle": ws.run_program(&robot, program.into())? }),
            Command::Cancel { robot } => json!({ "handle": ws.cancel(&robot)? }),
            Command::RecordStart { robot, sample_every } => {
                ws.start_recording(&robot, sample_every.unwrap_or(10))?;
                json!({})
            }
            Command::RecordStop { robot } => {
                let traj = ws.stop_recording(&robot)?;
                let id = self.store.put_trajectory(&traj)?;
                json!({ "trajectory_id": id, "samples": traj.len() })
            }
            Command::Play { robot, trajectory_id } => {
                let traj = self.store.trajectory(&trajectory_id)?;
                json!({ "handle": self.workspace.play(&robot, traj)? })
            }
            Command::TrainDmp { trajectory_id, trajectory, config } => {
                let demo = match (trajectory_id, trajectory) {
                    (Some(id), None) => self.store.trajectory(&id)?,
                    (None, Some(inline)) => inline.into_trajectory().map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))?,
                    _ => return Err(CommandError::new(codes::VALIDATION, "give exactly one of trajectory_id or trajectory")),
                };
                let model = dmp::train(&demo, &config.to_config()).map_err(|e| CommandError::new(codes::DMP, e.to_string()))?;
                json!({ "model_id": self.store.put_model(&model)?, "dof": model.dof(), "tau": model.tau })
            }
            Command::RolloutDmp { robot, model_id, x0, g, tau } => {
                let model = self.store.model(&model_id)?;
                let dof = self.workspace.robot(&robot)?.dof();
                if model.dof() != dof {
                    return Err(CommandError::new(codes::VALIDATION, format!("model has {} DOF, robot has {dof}", model.dof())));
                }
                let x0 = x0.unwrap_or_else(|| self.workspace.robot(&robot).map(|r| r.q()).unwrap_or_default());
                for (name, v) in [("x0", &x0), ("g", &g)] {
                    if v.len() != dof {
                        return Err(CommandError::new(codes::VALIDATION, format!("{name} has {} values, expected {dof}", v.len())));
                    }
                }
                let out = dmp::rollout(&model, &x0, &g, tau.unwrap_or(model.tau), self.workspace.sim_dt)
                    .map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))?;
                let handle = self.workspace.play(&robot, out.clone())?;
                json!({ "trajectory_id": self.store.put_trajectory(&out)?, "handle": handle })
            }
            Command::SaveTrajectory { trajectory } => {
                let traj = trajectory.into_trajectory().map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))?;
                json!({ "trajectory_id": self.store.put_trajectory(&traj)? })
            }
            Command::LoadTrajectory { trajectory_id } => {
                json!({ "trajectory": TrajectoryWire::from(&self.store.trajectory(&trajectory_id)?) })
            }
            Command::SaveModel { model } => {
                let model: DmpModel = serde_json::from_value(model).map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))?;
                model.validate().map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))?;
                json!({ "model_id": self.store.put_model(&model)? })
            }
            Command::LoadModel { model_id } => json!({ "model": self.store.model(&model_id)? }),
            Command::ListArtifacts => {
                let (trajectories, models) = self.store.list()?;
                json!({ "trajectories": trajectories, "models": models })
            }
        })
    }
}

pub struct Request {
    pub command: Command,
    pub reply: oneshot::Sender<Result<Value, CommandError>>,
}

/// Latest snapshot: its tick and the serialized `snapshot` frame.
#[derive(Debug, Clone, Default)]
pub struct SnapshotFrame {
    pub tick: u64,
    pub frame: Arc<str>,
}

/// Handles to a running simulation loop.
#[derive(Clone)]
pub struct SimHandle {
    pub mailbox: mpsc::Sender<Request>,
    pub snapshots: watch::Receiver<SnapshotFrame>,
    pub events: broadcast::Sender<Arc<str>>,
    /// Serialized `scene` frame.
    pub scene: Arc<str>,
    stop: Arc<AtomicBool>,
}

impl SimHandle {
    pub async fn request(&self, command: Command) -> Result<Value, CommandError> {
        let (reply, rx) = oneshot::channel();
        let gone = || CommandError::new(codes::SHUTTING_DOWN, "simulation stopped");
        self.mailbox.send(Request { command, reply }).map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

/// Run the engine on its own thread at the workspace rate, publishing a
/// snapshot every `1 / (sim_dt · broadcast_hz)` ticks. Commands are applied
/// at tick boundaries in arrival order.
pub fn spawn(mut engine: Engine, broadcast_hz: f64) -> SimHandle {
    let (mailbox, inbox) = mpsc::channel::<Request>();
    let snapshot = |ws: &Workspace| SnapshotFrame { tick: ws.tick_count, frame: crate::protocol::tagged("snapshot", &ws.snapshot()).into() };
    let (snap_tx, snapshots) = watch::channel(snapshot(&engine.workspace));
    let (events, _) = broadcast::channel(1024);
    let scene: Arc<str> = crate::protocol::tagged("scene", &engine.workspace.scene_info()).into();
    let stop = Arc::new(AtomicBool::new(false));
    let handle = SimHandle { mailbox, snapshots, events: events.clone(), scene, stop: stop.clone() };

    let dt = engine.workspace.sim_dt;
    let every = ((1.0 / (dt * broadcast_hz.max(1e-3))).round() as u64).max(1);
    std::thread::Builder::new()
        .name("workbench-sim".into())
        .spawn(move || {
            let period = Duration::from_secs_f64(dt);
            let mut next = Instant::now();
            while !stop.load(Ordering::Relaxed) {
                loop {
                    match inbox.try_recv() {
                        Ok(req) => {
                            let _ = req.reply.send(engine.apply(req.command));
                        }
                        Err(mpsc::TryRecvError::Empty) => break,
                        Err(mpsc::TryRecvError::Disconnected) => return,
                    }
                }
                match engine.workspace.tick() {
                    Ok(evs) => {
                        for e in evs {
                            let _ = events.send(json!({ "type": "event", "event": e }).to_string().into());
                        }
                    }
                    Err(e) => {
                        let err = CommandError::from(e);
                        let _ = events.send(crate::protocol::error_frame(&err).into());
                    }
                }
                if engine.workspace.tick_count % every == 0 {
                    snap_tx.send_replace(snapshot(&engine.workspace));
                }
                next += period;
                let now = Instant::now();
                if next > now {
                    std::thread::sleep(next - now);
                } else if now - next > Duration::from_millis(100) {
                    // far behind (suspended or overloaded): drop the backlog
                    next = now;
                }
            }
        })
        .expect("spawn simulation thread");
    handle
}
