//! The simulation: robots driven joint by joint, scene objects, interaction
//! modes, gripper attachment, recording, playback and instruction programs.
//!
//! Everything advances in fixed ticks of `sim_dt`. A tick applies any active
//! playback or program targets, steps every drive, carries attached objects
//! along with their end effector, advances the clock and takes recording
//! samples. Nothing here reads the wall clock, so equal command streams give
//! bit-equal states.

use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DriveParams, DynamicsError, JointMotionState};
use crate::kinematics::{self, IkOptions, IkResult, KinematicsError, Pose};
use crate::trajectory::{GripperState, Trajectory, TrajectoryError, TrajectoryMeta, TrajectorySample};
use crate::urdf::{self, Geometry, JointChain, RobotModel, UrdfError, Visual};

pub type Handle = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkspaceError {
    #[error(transparent)]
    Urdf(#[from] UrdfError),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("malformed scene: {0}")]
    MalformedScene(String),
    #[error("unknown robot `{0}`")]
    UnknownRobot(String),
    #[error("joint index {index} out of range for {dof} joints")]
    IndexOutOfRange { index: usize, dof: usize },
    #[error("robot `{robot}` is in {found:?} mode, operation needs {needed}")]
    WrongMode { robot: String, found: Mode, needed: &'static str },
    #[error("target unreachable (best residual {:.6})", .0.residual)]
    Unreachable(IkResult),
    #[error("robot `{0}` is busy with a playback or program")]
    BusyRobot(String),
    #[error("robot `{0}` is already recording")]
    AlreadyRecording(String),
    #[error("robot `{0}` is not recording")]
    NotRecording(String),
    #[error("robot `{robot}` joint {joint}: {source}")]
    NonFiniteState { robot: String, joint: usize, source: DynamicsError },
    #[error("expected {expected} values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("program is empty")]
    EmptyProgram,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// scene description

/// Pose as written in scene and program files: translation plus either a
/// quaternion `[x, y, z, w]` or fixed-axis roll/pitch/yaw. A quaternion wins
/// when both are present; neither means identity rotation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseRecord {
    pub xyz: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quat: Option<[f64; 4]>,
}

impl PoseRecord {
    pub fn to_pose(&self) -> Pose {
        let [x, y, z] = self.xyz;
        let rotation = match (self.quat, self.rpy) {
            (Some([qx, qy, qz, qw]), _) => {
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz))
            }
            (None, Some([r, p, yaw])) => UnitQuaternion::from_euler_angles(r, p, yaw),
            (None, None) => UnitQuaternion::identity(),
        };
        Isometry3::from_parts(Translation3::new(x, y, z), rotation)
    }

    pub fn from_pose(pose: &Pose) -> Self {
        let q = pose.rotation.quaternion();
        Self {
            xyz: pose.translation.vector.into(),
            rpy: None,
            quat: Some([q.i, q.j, q.k, q.w]),
        }
    }

    fn is_finite(&self) -> bool {
        self.xyz.iter().chain(self.rpy.iter().flatten()).chain(self.quat.iter().flatten()).all(|v| v.is_finite())
            && self.quat.is_none_or(|q| q.iter().map(|v| v * v).sum::<f64>() > 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SettleConfig {
    /// Position and velocity bound per joint.
    pub tolerance: f64,
    /// Consecutive ticks inside the bound.
    pub ticks: usize,
    /// Give up on a move this long after its path ends (seconds).
    pub timeout: f64,
}

impl Default for SettleConfig {
    fn default() -> Self {
        Self { tolerance: 1e-3, ticks: 50, timeout: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotDescriptor {
    pub id: String,
    /// Relative paths resolve against the scene file's directory.
    pub urdf: PathBuf,
    #[serde(default)]
    pub base_pose: PoseRecord,
    #[serde(default)]
    pub tip_link: Option<String>,
    #[serde(default)]
    pub home_q: Option<Vec<f64>>,
    #[serde(default)]
    pub drive: Option<DriveParams>,
    #[serde(default)]
    pub grasp_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Sphere,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub id: String,
    pub shape: ShapeKind,
    /// Box: `[x, y, z]` edge lengths; sphere: `[radius]`; cylinder:
    /// `[radius, length]`.
    pub size: Vec<f64>,
    #[serde(default)]
    pub pose: PoseRecord,
}

impl ObjectDescriptor {
    fn geometry(&self) -> Result<Geometry, WorkspaceError> {
        let bad = || {
            WorkspaceError::MalformedScene(format!("object `{}` has invalid size {:?} for {:?}", self.id, self.size, self.shape))
        };
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(bad());
        }
        match (self.shape, self.size.as_slice()) {
            (ShapeKind::Box, &[x, y, z]) => Ok(Geometry::Box { size: [x, y, z] }),
            (ShapeKind::Sphere, &[radius]) => Ok(Geometry::Sphere { radius }),
            (ShapeKind::Cylinder, &[radius, length]) => Ok(Geometry::Cylinder { radius, length }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneDescriptor {
    #[serde(default)]
    pub robots: Vec<RobotDescriptor>,
    #[serde(default)]
    pub objects: Vec<ObjectDescriptor>,
    #[serde(default)]
    pub sim_dt: Option<f64>,
    #[serde(default)]
    pub settle: Option<SettleConfig>,
}

// ---------------------------------------------------------------------------
// runtime state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Hold,
    FreeDrive,
    GhostDrive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    MoveToJoints(Vec<f64>),
    /// World-frame end-effector pose.
    MoveToPose(PoseRecord),
    GripperOpen,
    GripperClose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub instructions: Vec<Instruction>,
}

impl Program {
    /// Accepts `{"instructions": [...]}` or a bare instruction list.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Form {
            Full(Program),
            Bare(Vec<Instruction>),
        }
        Ok(match serde_json::from_str(text)? {
            Form::Full(p) => p,
            Form::Bare(instructions) => Program { name: None, instructions },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    PlaybackDone { robot: String, handle: Handle },
    ProgramStepDone { robot: String, handle: Handle, step: usize },
    ProgramDone { robot: String, handle: Handle },
    ProgramAborted { robot: String, handle: Handle, step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub state: GripperState,
    pub attached: Option<String>,
    pub grasp_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub geometry: Geometry,
    /// World pose of the reference point (the shape's center).
    pub pose: Pose,
    pub attached_to: Option<String>,
    /// Object pose in the holding end-effector frame while attached.
    grasp_offset: Pose,
}

/// Time-parameterized joint reference for playback. Cubic Hermite between
/// samples when velocities were recorded, piecewise linear otherwise.
#[derive(Debug, Clone, PartialEq)]
struct Reference {
    traj: Trajectory,
    hermite: bool,
}


impl Reference {
    fn new(traj: Trajectory) -> Self {
        let hermite = traj.len() > 1 && traj.samples().iter().all(|s| s.qd.is_some());
        Self { traj, hermite }
    }

    fn duration(&self) -> f64 {
        self.traj.duration()
    }

    fn end(&self) -> &[f64] {
        &self.traj.samples()[self.traj.len() - 1].q
    }

    fn gripper_at(&self, t: f64) -> Option<GripperState> {
        let s = self.traj.samples();
        let idx = s.partition_point(|x| x.t <= t);
        s[..idx].iter().rev().find_map(|x| x.gripper)
    }

    /// Reference position; held at the ends outside `[0, duration]`.
    fn eval(&self, t: f64) -> Vec<f64> {
        let s = self.traj.samples();
        if t >= self.duration() || s.len() == 1 {
            return self.end().to_vec();
        }
        if t <= 0.0 {
            return s[0].q.clone();
        }
        let i = self.traj.segment_index(t);
        let (a, b) = (&s[i], &s[i + 1]);
        let h = b.t - a.t;
        let u = (t - a.t) / h;
        if self.hermite {
            let (ma, mb) = (a.qd.as_ref().unwrap(), b.qd.as_ref().unwrap());
            let (u2, u3) = (u * u, u * u * u);
            let w = [2.0 * u3 - 3.0 * u2 + 1.0, u3 - 2.0 * u2 + u, -2.0 * u3 + 3.0 * u2, u3 - u2];
            (0..a.q.len()).map(|j| w[0] * a.q[j] + w[1] * h * ma[j] + w[2] * b.q[j] + w[3] * h * mb[j]).collect()
        } else {
            a.q.iter().zip(&b.q).map(|(x, y)| x + (y - x) * u).collect()
        }
    }

    /// Reference positions at the previous, current and next tick.
    fn window(&self, t: f64, dt: f64) -> [Vec<f64>; 3] {
        [self.eval(t - dt), self.eval(t), self.eval(t + dt)]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ProgramStep {
    NotStarted,
    Moving { reference: Reference, started: u64, target: Vec<f64>, settled: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Activity {
    Playback { handle: Handle, reference: Reference, started: u64, from_ghost: bool },
    Program { handle: Handle, program: Program, step: usize, state: ProgramStep },
}

impl Activity {
    fn handle(&self) -> Handle {
        match self {
            Activity::Playback { handle, .. } | Activity::Program { handle, .. } => *handle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Recorder {
    traj: Trajectory,
    started: u64,
    every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotInstance {
    pub id: String,
    pub model: RobotModel,
    pub chain: JointChain,
    pub base_pose: Pose,
    pub states: Vec<JointMotionState>,
    pub drives: Vec<DriveParams>,
    pub mode: Mode,
    pub ghost_q: Option<Vec<f64>>,
    pub gripper: Gripper,
    pub ik: IkOptions,
    velocity_limits: Vec<f64>,
    active: Option<Activity>,
    recorder: Option<Recorder>,
}

impl RobotInstance {
    pub fn dof(&self) -> usize {
        self.chain.dof()
    }

    pub fn q(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.position).collect()
    }

    pub fn qd(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.velocity).collect()
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    /// World pose of the tip link.
    pub fn ee_pose(&self) -> Pose {
        self.ee_pose_at(&self.q())
    }

    pub fn ee_pose_at(&self, q: &[f64]) -> Pose {
        self.base_pose * kinematics::end_effector(&self.chain, q).expect("state length matches chain")
    }

    /// World poses of every link on the chain, base first.
    pub fn link_poses(&self) -> Vec<Pose> {
        kinematics::forward_kinematics(&self.chain, &self.q())
            .expect("state length matches chain")
            .link_poses
            .into_iter()
            .map(|p| self.base_pose * p)
            .collect()
    }

    fn hold_here(&mut self) {
        for (d, s) in self.drives.iter_mut().zip(&self.states) {
            d.target_position = s.position;
            d.target_velocity = 0.0;
        }
    }

    /// Choose drive targets so that one semi-implicit step from the
    /// reference state at `now` lands on the reference at `next`. Any
    /// tracking error is still pulled in by the drive's own feedback.
    fn track(&mut self, [prev, now, next]: &[Vec<f64>; 3], dt: f64) {
        for (j, d) in self.drives.iter_mut().enumerate() {
            let v_now = (now[j] - prev[j]) / dt;
            let v_next = (next[j] - now[j]) / dt;
            let push = d.inertia * (v_next - v_now) / dt;
            d.target_position = now[j];
            d.target_velocity = v_now;
            if d.stiffness > 0.0 {
                d.target_position += push / d.stiffness;
            } else if d.damping > 0.0 {
                d.target_velocity += push / d.damping;
            }
        }
    }

    fn solve_world(&self, target: &Pose, q0: &[f64]) -> Result<IkResult, WorkspaceError> {
        let local = self.base_pose.inverse() * target;
        match kinematics::solve_ik(&self.chain, &local, q0, &self.ik) {
            Ok(r) => Ok(r),
            Err(KinematicsError::Unreachable(best)) => Err(WorkspaceError::Unreachable(best)),
            Err(e) => Err(e.into()),
        }
    }

    fn joint_path(&self, to: &[f64], dt: f64) -> Result<Trajectory, WorkspaceError> {
        Ok(kinematics::interpolate_joint_path(&self.q(), to, &self.velocity_limits, dt)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub robots: Vec<RobotInstance>,
    pub objects: Vec<SceneObject>,
    pub tick_count: u64,
    pub sim_dt: f64,
    pub settle: SettleConfig,
    next_handle: Handle,
}

impl Default for Workspace {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Workspace {
    pub fn new(sim_dt: f64) -> Self {
        Self { robots: Vec::new(), objects: Vec::new(), tick_count: 0, sim_dt, settle: SettleConfig::default(), next_handle: 1 }
    }

    pub fn time(&self) -> f64 {
        self.tick_count as f64 * self.sim_dt
    }

    /// Read a scene file. URDF paths resolve against its directory.
    pub fn load_scene(path: impl AsRef<Path>) -> Result<Self, WorkspaceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| WorkspaceError::Io(format!("{}: {e}", path.display())))?;
        let desc: SceneDescriptor = serde_json::from_str(&text).map_err(|e| WorkspaceError::MalformedScene(e.to_string()))?;
        Self::from_descriptor(&desc, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_descriptor(desc: &SceneDescriptor, base_dir: &Path) -> Result<Self, WorkspaceError> {
        let sim_dt = desc.sim_dt.unwrap_or(1e-3);
        if !(sim_dt.is_finite() && sim_dt > 0.0) {
            return Err(WorkspaceError::MalformedScene(format!("sim_dt must be > 0, got {sim_dt}")));
        }
        let mut ws = Self::new(sim_dt);
        if let Some(settle) = desc.settle {
            ws.settle = settle;
        }
        for r in &desc.robots {
            let path = if r.urdf.is_absolute() { r.urdf.clone() } else { base_dir.join(&r.urdf) };
            let xml = std::fs::read_to_string(&path).map_err(|e| WorkspaceError::Io(format!("{}: {e}", path.display())))?;
            let model = urdf::parse_urdf(&xml)?;
            ws.add_robot(r, model)?;
        }
        for o in &desc.objects {
            ws.add_object(o)?;
        }
        Ok(ws)
    }

    pub fn add_robot(&mut self, desc: &RobotDescriptor, model: RobotModel) -> Result<(), WorkspaceError> {
        if self.robots.iter().any(|r| r.id == desc.id) {
            return Err(WorkspaceError::DuplicateId(desc.id.clone()));
        }
        if !desc.base_pose.is_finite() {
            return Err(WorkspaceError::MalformedScene(format!("robot `{}` has a non-finite base pose", desc.id)));
        }
        let tip = desc.tip_link.clone().unwrap_or_else(|| model.deepest_leaf().to_owned());
        let chain = urdf::build_chain(&model, &model.root_link, &tip)?;
        let dof = chain.dof();
        let mut home = desc.home_q.clone().unwrap_or_else(|| vec![0.0; dof]);
        if home.len() != dof {
            return Err(WorkspaceError::DimensionMismatch { expected: dof, found: home.len() });
        }
        chain.clamp(&mut home);
        let drive = desc.drive.unwrap_or_default();
        drive.validate().map_err(|e| WorkspaceError::MalformedScene(format!("robot `{}`: {e}", desc.id)))?;
        let velocity_limits = chain.actuated().map(|j| j.velocity_limit().unwrap_or(0.0)).collect();
        let grasp_radius = desc.grasp_radius.unwrap_or(0.05);
        self.robots.push(RobotInstance {
            id: desc.id.clone(),
            base_pose: desc.base_pose.to_pose(),
            states: home.iter().map(|&q| JointMotionState::at_rest(q)).collect(),
            drives: home.iter().map(|&q| DriveParams { target_position: q, target_velocity: 0.0, ..drive }).collect(),
            mode: Mode::Hold,
            ghost_q: None,
            gripper: Gripper { state: GripperState::Open, attached: None, grasp_radius },
            ik: IkOptions::default(),
            velocity_limits,
            active: None,
            recorder: None,
            model,
            chain,
        });
        Ok(())
    }

    pub fn add_object(&mut self, desc: &ObjectDescriptor) -> Result<(), WorkspaceError> {
        if self.objects.iter().any(|o| o.id == desc.id) {
            return Err(WorkspaceError::DuplicateId(desc.id.clone()));
        }
        if !desc.pose.is_finite() {
            return Err(WorkspaceError::MalformedScene(format!("object `{}` has a non-finite pose", desc.id)));
        }
        self.objects.push(SceneObject {
            id: desc.id.clone(),
            geometry: desc.geometry()?,
            pose: desc.pose.to_pose(),
            attached_to: None,
            grasp_offset: Pose::identity(),
        });
        Ok(())
    }

    pub fn robot(&self, id: &str) -> Result<&RobotInstance, WorkspaceError> {
        self.robots.iter().find(|r| r.id == id).ok_or_else(|| WorkspaceError::UnknownRobot(id.to_owned()))
    }

    fn robot_index(&self, id: &str) -> Result<usize, WorkspaceError> {
        self.robots.iter().position(|r| r.id == id).ok_or_else(|| WorkspaceError::UnknownRobot(id.to_owned()))
    }

    fn idle_robot(&mut self, id: &str) -> Result<&mut RobotInstance, WorkspaceError> {
        let i = self.robot_index(id)?;
        let robot = &mut self.robots[i];
        if robot.is_busy() {
            return Err(WorkspaceError::BusyRobot(id.to_owned()));
        }
        Ok(robot)
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn take_handle(&mut self) -> Handle {
        let h = self.next_handle;
        self.next_handle += 1;
        h
    }

    // -- interaction ------------------------------------------------------

    pub fn set_mode(&mut self, robot_id: &str, mode: Mode) -> Result<(), WorkspaceError> {
        let robot = self.idle_robot(robot_id)?;
        if robot.mode == mode {
            return Ok(());
        }
        robot.ghost_q = (mode == Mode::GhostDrive).then(|| robot.q());
        robot.mode = mode;
        Ok(())
    }

    /// Returns the clamped target that was applied.
    pub fn drag_joint(&mut self, robot_id: &str, joint: usize, target: f64) -> Result<f64, WorkspaceError> {
        let robot = self.idle_robot(robot_id)?;
        let dof = robot.dof();
        if joint >= dof {
            return Err(WorkspaceError::IndexOutOfRange { index: joint, dof });
        }
        if !target.is_finite() {
            return Err(WorkspaceError::MalformedScene(format!("joint target must be finite, got {target}")));
        }
        let clamped = robot.chain.actuated().nth(joint).expect("index checked").clamp(target);
        match robot.mode {
            Mode::FreeDrive => {
                robot.drives[joint].target_position = clamped;
                robot.drives[joint].target_velocity = 0.0;
            }
            Mode::GhostDrive => {
                robot.ghost_q.as_mut().expect("ghost exists in ghost mode")[joint] = clamped;
            }
            Mode::Hold => {
                return Err(WorkspaceError::WrongMode { robot: robot_id.to_owned(), found: Mode::Hold, needed: "free_drive or ghost_drive" })
            }
        }
        Ok(clamped)
    }

    /// Solve IK for a world-frame end-effector pose. Free drive starts from
    /// the body's joints and retargets the drives; ghost drive starts from
    /// the ghost and moves only the ghost.
    pub fn drag_ee(&mut self, robot_id: &str, target: &Pose) -> Result<IkResult, WorkspaceError> {
        let robot = self.idle_robot(robot_id)?;
        let q0 = match robot.mode {
            Mode::FreeDrive => robot.q(),
            Mode::GhostDrive => robot.ghost_q.clone().expect("ghost exists in ghost mode"),
            Mode::Hold => {
                return Err(WorkspaceError::WrongMode { robot: robot_id.to_owned(), found: Mode::Hold, needed: "free_drive or ghost_drive" })
            }
        };
        let result = robot.solve_world(target, &q0)?;
        match robot.mode {
            Mode::FreeDrive => {
                for (d, q) in robot.drives.iter_mut().zip(&result.q) {
                    d.target_position = *q;
                    d.target_velocity = 0.0;
                }
            }
            _ => robot.ghost_q = Some(result.q.clone()),
        }
        Ok(result)
    }

    /// Move the body to the ghost along a velocity-limited joint path; the
    /// robot drops to hold once the path has played.
    pub fn commit_ghost(&mut self, robot_id: &str) -> Result<Handle, WorkspaceError> {
        let dt = self.sim_dt;
        let robot = self.idle_robot(robot_id)?;
        if robot.mode != Mode::GhostDrive {
            return Err(WorkspaceError::WrongMode { robot: robot_id.to_owned(), found: robot.mode, needed: "ghost_drive" });
        }
        let goal = robot.ghost_q.clone().expect("ghost exists in ghost mode");
        let path = robot.joint_path(&goal, dt)?;
        let handle = self.take_handle();
        let started = self.tick_count;
        let i = self.robot_index(robot_id)?;
        let robot = &mut self.robots[i];
        robot.active = Some(Activity::Playback { handle, reference: Reference::new(path), started, from_ghost: true });
        Ok(handle)
    }

    /// Track a trajectory from the current tick. Samples carrying a gripper
    /// state switch the gripper when playback passes them.
    pub fn play(&mut self, robot_id: &str, traj: Trajectory) -> Result<Handle, WorkspaceError> {
        let robot = self.idle_robot(robot_id)?;
        if traj.dof() != robot.dof() {
            return Err(WorkspaceError::DimensionMismatch { expected: robot.dof(), found: traj.dof() });
        }
        if traj.is_empty() {
            return Err(WorkspaceError::Trajectory(TrajectoryError::TooFewSamples { needed: 1, found: 0 }));
        }
        let handle = self.take_handle();
        let started = self.tick_count;
        let i = self.robot_index(robot_id)?;
        let robot = &mut self.robots[i];
        robot.active = Some(Activity::Playback { handle, reference: Reference::new(traj), started, from_ghost: false });
        Ok(handle)
    }

    pub fn run_program(&mut self, robot_id: &str, program: Program) -> Result<Handle, WorkspaceError> {
        if program.instructions.is_empty() {
            return Err(WorkspaceError::EmptyProgram);
        }
        let dof = self.idle_robot(robot_id)?.dof();
        for ins in &program.instructions {
            match ins {
                Instruction::MoveToJoints(q) if q.len() != dof => {
                    return Err(WorkspaceError::DimensionMismatch { expected: dof, found: q.len() })
                }
                Instruction::MoveToPose(p) if !p.is_finite() => {
                    return Err(WorkspaceError::MalformedScene("program pose must be finite".into()))
                }
                _ => {}
            }
        }
        let handle = self.take_handle();
        let i = self.robot_index(robot_id)?;
        let robot = &mut self.robots[i];
        robot.active = Some(Activity::Program { handle, program, step: 0, state: ProgramStep::NotStarted });
        Ok(handle)
    }

    /// Abandon any playback or program; the robot holds where it is.
    pub fn cancel(&mut self, robot_id: &str) -> Result<Option<Handle>, WorkspaceError> {
        let i = self.robot_index(robot_id)?;
        let robot = &mut self.robots[i];
        let handle = robot.active.take().map(|a| a.handle());
        if handle.is_some() {
            robot.hold_here();
        }
        Ok(handle)
    }

    pub fn set_gripper(&mut self, robot_id: &str, state: GripperState) -> Result<Option<String>, WorkspaceError> {
        let i = self.robot_index(robot_id)?;
        Ok(self.apply_gripper(i, state))
    }

    /// Returns the id of the object now held, if any.
    fn apply_gripper(&mut self, i: usize, state: GripperState) -> Option<String> {
        let ee = self.robots[i].ee_pose();
        let robot_id = self.robots[i].id.clone();
        match state {
            GripperState::Open => {
                if let Some(id) = self.robots[i].gripper.attached.take() {
                    if let Some(obj) = self.objects.iter_mut().find(|o| o.id == id) {
                        obj.attached_to = None;
                    }
                }
                self.robots[i].gripper.state = GripperState::Open;
                None
            }
            GripperState::Closed => {
                let gripper = &self.robots[i].gripper;
                if gripper.state == GripperState::Closed {
                    return gripper.attached.clone();
                }
                let radius = gripper.grasp_radius;
                let nearest = self
                    .objects
                    .iter_mut()
                    .filter(|o| o.attached_to.is_none())
                    .map(|o| ((o.pose.translation.vector - ee.translation.vector).norm(), o))
                    .filter(|(d, _)| *d <= radius)
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, o)| o);
                let attached = nearest.map(|obj| {
                    obj.attached_to = Some(robot_id);
                    obj.grasp_offset = ee.inverse() * obj.pose;
                    obj.id.clone()
                });
                let gripper = &mut self.robots[i].gripper;
                gripper.state = GripperState::Closed;
                gripper.attached = attached.clone();
                attached
            }
        }
    }

    // -- recording --------------------------------------------------------

    /// Sample `(t, q, qd, gripper)` now and then every `every` ticks.
    pub fn start_recording(&mut self, robot_id: &str, every: u64) -> Result<(), WorkspaceError> {
        let tick = self.tick_count;
        let i = self.robot_index(robot_id)?;
        let robot = &mut self.robots[i];
        if robot.recorder.is_some() {
            return Err(WorkspaceError::AlreadyRecording(robot_id.to_owned()));
        }
        let meta = TrajectoryMeta { robot: robot.model.name.clone(), joint_names: robot.chain.joint_names(), created_at: None };
        let mut traj = Trajectory::new(robot.dof(), meta);
        traj.append(record_sample(robot, 0.0))?;
        robot.recorder = Some(Recorder { traj, started: tick, every: every.max(1) });
        Ok(())
    }

    pub fn stop_recording(&mut self, robot_id: &str) -> Result<Trajectory, WorkspaceError> {
        let i = self.robot_index(robot_id)?;
        self.robots[i]
            .recorder
            .take()
            .map(|r| r.traj)
            .ok_or_else(|| WorkspaceError::NotRecording(robot_id.to_owned()))
    }

    // -- clock ------------------------------------------------------------

    pub fn tick(&mut self) -> Result<Vec<Event>, WorkspaceError> {
        let mut events = Vec::new();
        let dt = self.sim_dt;
        for i in 0..self.robots.len() {
            self.drive_activity(i, &mut events);
            let robot = &mut self.robots[i];
            for (j, (state, drive)) in robot.states.iter_mut().zip(&robot.drives).enumerate() {
                *state = dynamics::step(state, drive, dt)
                    .map_err(|source| WorkspaceError::NonFiniteState { robot: robot.id.clone(), joint: j, source })?;
            }
            self.finish_activity(i, &mut events);
            self.carry_attached(i);
        }
        self.tick_count += 1;
        let tick = self.tick_count;
        for robot in &mut self.robots {
            let Some(rec) = &robot.recorder else { continue };
            let elapsed = tick - rec.started;
            if elapsed % rec.every == 0 {
                let sample = record_sample(robot, elapsed as f64 * dt);
                robot.recorder.as_mut().expect("checked").traj.append(sample)?;
            }
        }
        Ok(events)
    }

    pub fn run_ticks(&mut self, n: u64) -> Result<Vec<Event>, WorkspaceError> {
        let mut events = Vec::new();
        for _ in 0..n {
            events.extend(self.tick()?);
        }
        Ok(events)
    }

    /// Set drive targets from the active playback or program before the
    /// drives are stepped.
    fn drive_activity(&mut self, i: usize, events: &mut Vec<Event>) {
        let tick = self.tick_count;
        let dt = self.sim_dt;
        let Some(mut activity) = self.robots[i].active.take() else { return };
        let keep = match &mut activity {
            Activity::Playback { reference, started, .. } => {
                let t = (tick - *started) as f64 * dt;
                if let Some(g) = reference.gripper_at(t) {
                    if g != self.robots[i].gripper.state {
                        self.apply_gripper(i, g);
                    }
                }
                self.robots[i].track(&reference.window(t, dt), dt);
                true
            }
            Activity::Program { handle, program, step, state } => {
                let handle = *handle;
                let robot_id = self.robots[i].id.clone();
                loop {
                    if let ProgramStep::Moving { reference, started, .. } = state {
                        let t = (tick - *started) as f64 * dt;
                        self.robots[i].track(&reference.window(t, dt), dt);
                        break true;
                    }
                    match program.instructions[*step].clone() {
                        Instruction::GripperOpen | Instruction::GripperClose => {
                            let g = if program.instructions[*step] == Instruction::GripperOpen {
                                GripperState::Open
                            } else {
                                GripperState::Closed
                            };
                            self.apply_gripper(i, g);
                            events.push(Event::ProgramStepDone { robot: robot_id.clone(), handle, step: *step });
                            *step += 1;
                            if *step == program.instructions.len() {
                                events.push(Event::ProgramDone { robot: robot_id, handle });
                                break false;
                            }
                            // the next step starts on the following tick
                            break true;
                        }
                        Instruction::MoveToJoints(q) => {
                            let mut q = q;
                            self.robots[i].chain.clamp(&mut q);
                            match self.robots[i].joint_path(&q, dt) {
                                Ok(path) => *state = ProgramStep::Moving { reference: Reference::new(path), started: tick, target: q, settled: 0 },
                                Err(e) => {
                                    self.abort(i, handle, *step, e.to_string(), events);
                                    break false;
                                }
                            }
                        }
                        Instruction::MoveToPose(pose) => {
                            let robot = &self.robots[i];
                            let solved = robot.solve_world(&pose.to_pose(), &robot.q()).and_then(|r| Ok((robot.joint_path(&r.q, dt)?, r.q)));
                            match solved {
                                Ok((path, q)) => {
                                    *state = ProgramStep::Moving { reference: Reference::new(path), started: tick, target: q, settled: 0 }
                                }
                                Err(e) => {
                                    self.abort(i, handle, *step, e.to_string(), events);
                                    break false;
                                }
                            }
                        }
                    }
                }
            }
        };
        if keep {
            self.robots[i].active = Some(activity);
        }
    }

    fn abort(&mut self, i: usize, handle: Handle, step: usize, reason: String, events: &mut Vec<Event>) {
        let robot = &mut self.robots[i];
        robot.hold_here();
        events.push(Event::ProgramAborted { robot: robot.id.clone(), handle, step, reason });
    }

    /// Completion checks after the drives have been stepped.
    fn finish_activity(&mut self, i: usize, events: &mut Vec<Event>) {
        let elapsed_ticks = |started: u64| self.tick_count + 1 - started;
        let dt = self.sim_dt;
        let settle = self.settle;
        let robot = &mut self.robots[i];
        let Some(activity) = robot.active.as_mut() else { return };
        match activity {
            Activity::Playback { handle, reference, started, from_ghost } => {
                if elapsed_ticks(*started) as f64 * dt >= reference.duration() {
                    let (handle, from_ghost) = (*handle, *from_ghost);
                    let end = reference.end().to_vec();
                    for (d, q) in robot.drives.iter_mut().zip(end) {
                        d.target_position = q;
                        d.target_velocity = 0.0;
                    }
                    if from_ghost {
                        robot.mode = Mode::Hold;
                        robot.ghost_q = None;
                    }
                    robot.active = None;
                    events.push(Event::PlaybackDone { robot: robot.id.clone(), handle });
                }
            }
            Activity::Program { handle, program, step, state } => {
                let ProgramStep::Moving { reference, started, target, settled } = state else { return };
                let elapsed = elapsed_ticks(*started) as f64 * dt;
                if elapsed < reference.duration() {
                    return;
                }
                let inside = robot
                    .states
                    .iter()
                    .zip(target.iter())
                    .all(|(s, q)| (s.position - q).abs() <= settle.tolerance && s.velocity.abs() <= settle.tolerance);
                *settled = if inside { *settled + 1 } else { 0 };
                let (handle, n) = (*handle, program.instructions.len());
                if *settled >= settle.ticks {
                    events.push(Event::ProgramStepDone { robot: robot.id.clone(), handle, step: *step });
                    *step += 1;
                    *state = ProgramStep::NotStarted;
                    if *step == n {
                        events.push(Event::ProgramDone { robot: robot.id.clone(), handle });
                        robot.active = None;
                    }
                } else if elapsed > reference.duration() + settle.timeout {
                    let step = *step;
                    robot.active = None;
                    self.abort(i, handle, step, "move did not settle".into(), events);
                }
            }
        }
    }

    fn carry_attached(&mut self, i: usize) {
        let robot = &self.robots[i];
        let Some(id) = &robot.gripper.attached else { return };
        let ee = robot.ee_pose();
        if let Some(obj) = self.objects.iter_mut().find(|o| &o.id == id) {
            obj.pose = ee * obj.grasp_offset;
        }
    }

    // -- observation ------------------------------------------------------

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            tick: self.tick_count,
            time: self.time(),
            robots: self
                .robots
                .iter()
                .map(|r| RobotSnapshot {
                    id: r.id.clone(),
                    mode: r.mode,
                    q: r.q(),
                    qd: r.qd(),
                    ghost_q: r.ghost_q.clone(),
                    ee_pose: PoseRecord::from_pose(&r.ee_pose()),
                    link_poses: r.link_poses().iter().map(PoseRecord::from_pose).collect(),
                    gripper: r.gripper.clone(),
                    recording: r.is_recording(),
                    active: r.active.as_ref().map(|a| match a {
                        Activity::Playback { handle, .. } => ActiveSnapshot { kind: "playback", handle: *handle, step: None },
                        Activity::Program { handle, step, .. } => ActiveSnapshot { kind: "program", handle: *handle, step: Some(*step) },
                    }),
                })
                .collect(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectSnapshot { id: o.id.clone(), pose: PoseRecord::from_pose(&o.pose), attached_to: o.attached_to.clone() })
                .collect(),
        }
    }

    /// Static description for renderers: link geometry and joint layout.
    pub fn scene_info(&self) -> SceneInfo {
        SceneInfo {
            sim_dt: self.sim_dt,
            robots: self
                .robots
                .iter()
                .map(|r| RobotInfo {
                    id: r.id.clone(),
                    model: r.model.name.clone(),
                    base_pose: PoseRecord::from_pose(&r.base_pose),
                    joints: r
                        .chain
                        .actuated()
                        .map(|j| JointInfo {
                            name: j.name.clone(),
                            kind: j.kind.as_str(),
                            lower: j.limits.and_then(|l| l.lower),
                            upper: j.limits.and_then(|l| l.upper),
                            velocity: j.velocity_limit(),
                        })
                        .collect(),
                    links: r
                        .chain
                        .link_names()
                        .into_iter()
                        .map(|name| {
                            let visuals = r.model.link(&name).map(|l| l.render_visuals()).unwrap_or_default();
                            LinkInfo { name, visuals }
                        })
                        .collect(),
                })
                .collect(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectInfo { id: o.id.clone(), geometry: o.geometry.clone() })
                .collect(),
        }
    }
}

fn record_sample(robot: &RobotInstance, t: f64) -> TrajectorySample {
    TrajectorySample { t, q: robot.q(), qd: Some(robot.qd()), gripper: Some(robot.gripper.state) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSnapshot {
    pub tick: u64,
    pub time: f64,
    pub robots: Vec<RobotSnapshot>,
    pub objects: Vec<ObjectSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotSnapshot {
    pub id: String,
    pub mode: Mode,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub ghost_q: Option<Vec<f64>>,
    pub ee_pose: PoseRecord,
    pub link_poses: Vec<PoseRecord>,
    pub gripper: Gripper,
    pub recording: bool,
    pub active: Option<ActiveSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSnapshot {
    pub kind: &'static str,
    pub handle: Handle,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectSnapshot {
    pub id: String,
    pub pose: PoseRecord,
    pub attached_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneInfo {
    pub sim_dt: f64,
    pub robots: Vec<RobotInfo>,
    pub objects: Vec<ObjectInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotInfo {
    pub id: String,
    pub model: String,
    pub base_pose: PoseRecord,
    pub joints: Vec<JointInfo>,
    /// Chain links in snapshot `link_poses` order.
    pub links: Vec<LinkInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointInfo {
    pub name: String,
    pub kind: &'static str,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub velocity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkInfo {
    pub name: String,
    pub visuals: Vec<Visual>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectInfo {
    pub id: String,
    pub geometry: Geometry,
}

/// World position of a pose, handy for distance checks.
pub fn position(pose: &Pose) -> Vector3<f64> {
    pose.translation.vector
}
