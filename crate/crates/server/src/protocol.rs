//! Wire messages. Every frame is one JSON object whose `type` field names it.
//!
//! Client to server: `{"id": "...", "type": "<command>", "payload": {...}}`.
//! Server to client: `ack`, `scene`, `snapshot`, `event` and `error` frames.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use workbench_core::dmp::DmpConfig;
use workbench_core::trajectory::{GripperState, Trajectory, TrajectoryError, TrajectoryMeta, TrajectorySample};
use workbench_core::workspace::{Mode, PoseRecord, Program};

#[derive(Debug, Clone, Deserialize)]
pub struct Envelope {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Subscribe,
    Unsubscribe,
    SetMode { robot: String, mode: Mode },
    DragJoint { robot: String, joint: usize, target: f64 },
    DragEe { robot: String, pose: PoseRecord },
    CommitGhost { robot: String },
    SetGripper { robot: String, state: GripperState },
    RunProgram { robot: String, program: ProgramInput },
    Cancel { robot: String },
    RecordStart { robot: String, #[serde(default)] sample_every: Option<u64> },
    RecordStop { robot: String },
    Play { robot: String, trajectory_id: String },
    TrainDmp {
        #[serde(default)]
        trajectory_id: Option<String>,
        #[serde(default)]
        trajectory: Option<TrajectoryWire>,
        #[serde(default)]
        config: DmpOptions,
    },
    RolloutDmp {
        robot: String,
        model_id: String,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        g: Vec<f64>,
        #[serde(default)]
        tau: Option<f64>,
    },
    SaveTrajectory { trajectory: TrajectoryWire },
    LoadTrajectory { trajectory_id: String },
    SaveModel { model: Value },
    LoadModel { model_id: String },
    ListArtifacts,
}

pub const COMMAND_NAMES: &[&str] = &[
    "subscribe",
    "unsubscribe",
    "set_mode",
    "drag_joint",
    "drag_ee",
    "commit_ghost",
    "set_gripper",
    "run_program",
    "cancel",
    "record_start",
    "record_stop",
    "play",
    "train_dmp",
    "rollout_dmp",
    "save_trajectory",
    "load_trajectory",
    "save_model",
    "load_model",
    "list_artifacts",
];

impl Command {
    /// Decode an envelope's type and payload. Payload-less commands accept
    /// a missing or empty payload.
    pub fn decode(envelope: &Envelope) -> Result<Self, CommandError> {
        if !COMMAND_NAMES.contains(&envelope.kind.as_str()) {
            return Err(CommandError::new(codes::UNKNOWN_COMMAND, format!("unknown command `{}`", envelope.kind)));
        }
        let payload = match &envelope.payload {
            Value::Object(m) if m.is_empty() => Value::Null,
            other => other.clone(),
        };
        let tagged = if payload.is_null() {
            serde_json::json!({ "type": envelope.kind })
        } else {
            serde_json::json!({ "type": envelope.kind, "payload": payload })
        };
        serde_json::from_value(tagged).map_err(|e| CommandError::new(codes::VALIDATION, e.to_string()))
    }
}

/// A program given inline, either as `{"instructions": [...]}` or a bare list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProgramInput {
    Full(Program),
    Bare(Vec<workbench_core::workspace::Instruction>),
}

impl From<ProgramInput> for Program {
    fn from(p: ProgramInput) -> Self {
        match p {
            ProgramInput::Full(p) => p,
            ProgramInput::Bare(instructions) => Program { name: None, instructions },
        }
    }
}

/// Inline trajectory: the file header fields plus the samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryWire {
    pub dof: usize,
    #[serde(default, flatten)]
    pub meta: TrajectoryMeta,
    pub samples: Vec<TrajectorySample>,
}

impl TrajectoryWire {
    pub fn into_trajectory(self) -> Result<Trajectory, TrajectoryError> {
        Trajectory::from_samples(self.dof, self.meta, self.samples)
    }
}

impl From<&Trajectory> for TrajectoryWire {
    fn from(t: &Trajectory) -> Self {
        Self { dof: t.dof(), meta: t.meta.clone(), samples: t.samples().to_vec() }
    }
}

/// Training overrides; unset fields keep the library defaults. Setting `k`
/// without `d` picks the critically damped `d = 2√k`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmpOptions {
    pub k: Option<f64>,
    pub d: Option<f64>,
    pub n_basis: Option<usize>,
    pub alpha: Option<f64>,
    pub width_scale: Option<f64>,
    pub dt: Option<f64>,
}

impl DmpOptions {
    pub fn to_config(self) -> DmpConfig {
        let mut c = match self.k {
            Some(k) => DmpConfig::with_stiffness(k),
            None => DmpConfig::default(),
        };
        if let Some(d) = self.d {
            c.d = d;
        }
        if let Some(n) = self.n_basis {
            c.n_basis = n;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(w) = self.width_scale {
            c.width_scale = w;
        }
        if let Some(dt) = self.dt {
            c.dt = dt;
        }
        c
    }
}

pub mod codes {
    pub const UNKNOWN_COMMAND: &str = "unknown_command";
    pub const VALIDATION: &str = "validation_error";
    pub const MALFORMED_FRAME: &str = "malformed_frame";
    pub const NOT_FOUND: &str = "not_found";
    pub const IO: &str = "io_error";
    pub const DMP: &str = "dmp_error";
    pub const SHUTTING_DOWN: &str = "shutting_down";
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandError {
    pub code: &'static str,
    pub message: String,
}

impl CommandError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound<'a> {
    Ack {
        id: &'a str,
        ok: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        result: Option<&'a Value>,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<&'a CommandError>,
    },
    Error { error: &'a CommandError },
}

pub fn ack(id: &str, outcome: &Result<Value, CommandError>) -> String {
    let frame = match outcome {
        Ok(v) => Outbound::Ack { id, ok: true, result: Some(v), error: None },
        Err(e) => Outbound::Ack { id, ok: false, result: None, error: Some(e) },
    };
    serde_json::to_string(&frame).expect("frames serialize")
}

pub fn error_frame(error: &CommandError) -> String {
    serde_json::to_string(&Outbound::Error { error }).expect("frames serialize")
}

/// `{"type": kind, ...body}` for any body that serializes to an object.
pub fn tagged<T: Serialize>(kind: &str, body: &T) -> String {
    let mut v = serde_json::to_value(body).expect("frames serialize");
    if let Value::Object(m) = &mut v {
        m.insert("type".into(), Value::String(kind.into()));
    }
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope(v: Value) -> Envelope {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn payloadless_commands_accept_missing_or_empty_payload() {
        for v in [json_env("subscribe", None), json_env("subscribe", Some(serde_json::json!({})))] {
            assert!(matches!(Command::decode(&envelope(v)), Ok(Command::Subscribe)));
        }
    }

    #[test]
    fn unknown_and_invalid_commands_get_distinct_codes() {
        let e = Command::decode(&envelope(json_env("fly", None))).unwrap_err();
        assert_eq!(e.code, codes::UNKNOWN_COMMAND);
        let e = Command::decode(&envelope(json_env("drag_joint", Some(serde_json::json!({ "robot": "r", "joint": -1, "target": 0 }))))).unwrap_err();
        assert_eq!(e.code, codes::VALIDATION);
        let e = Command::decode(&envelope(json_env("cancel", Some(serde_json::json!({ "robot": "r", "extra": 1 }))))).unwrap_err();
        assert_eq!(e.code, codes::VALIDATION);
    }

    #[test]
    fn programs_decode_in_both_forms() {
        let list = serde_json::json!({ "robot": "r", "program": ["gripper_open", { "move_to_joints": [0.0] }] });
        let full = serde_json::json!({ "robot": "r", "program": { "instructions": ["gripper_close"] } });
        for p in [list, full] {
            assert!(matches!(Command::decode(&envelope(json_env("run_program", Some(p)))), Ok(Command::RunProgram { .. })));
        }
    }

    #[test]
    fn stiffness_override_keeps_critical_damping() {
        let c = DmpOptions { k: Some(100.0), ..Default::default() }.to_config();
        assert_eq!(c.d, 20.0);
    }

    fn json_env(kind: &str, payload: Option<Value>) -> Value {
        match payload {
            Some(p) => serde_json::json!({ "id": "1", "type": kind, "payload": p }),
            None => serde_json::json!({ "id": "1", "type": kind }),
        }
    }
}
