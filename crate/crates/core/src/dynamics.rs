//! Per-joint drive law and the fixed-step integrator behind every actuated
//! joint in the workspace.
//!
//! A drive pushes its joint with
//! `effect = stiffness·(target_position − position) + damping·(target_velocity − velocity)`,
//! saturated at `±force_limit`. With zero stiffness the joint is purely
//! velocity driven; with zero damping it is purely position driven.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite joint state (position {position}, velocity {velocity})")]
    NonFiniteState { position: f64, velocity: f64 },
    #[error("invalid drive parameters: {0}")]
    InvalidParams(&'static str),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveParams {
    pub stiffness: f64,
    pub damping: f64,
    /// May be `f64::INFINITY`.
    pub force_limit: f64,
    pub target_position: f64,
    pub target_velocity: f64,
    pub inertia: f64,
}

impl Default for DriveParams {
    /// Critically damped at unit inertia.
    fn default() -> Self {
        Self {
            stiffness: 100.0,
            damping: 20.0,
            force_limit: 1000.0,
            target_position: 0.0,
            target_velocity: 0.0,
            inertia: 1.0,
        }
    }
}

impl DriveParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.stiffness >= 0.0 && self.stiffness.is_finite()) {
            return Err(DynamicsError::InvalidParams("stiffness must be finite and >= 0"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(DynamicsError::InvalidParams("damping must be finite and >= 0"));
        }
        if !(self.force_limit >= 0.0) {
            return Err(DynamicsError::InvalidParams("force_limit must be >= 0"));
        }
        if !(self.inertia > 0.0 && self.inertia.is_finite()) {
            return Err(DynamicsError::InvalidParams("inertia must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointMotionState {
    pub position: f64,
    pub velocity: f64,
}

impl JointMotionState {
    pub fn at_rest(position: f64) -> Self {
        Self { position, velocity: 0.0 }
    }
}

/// Force or torque the drive applies in the current state.
///
/// The velocity term opposes the current velocity (`target − current`), which
/// is the stable sign.
pub fn drive_effect(params: &DriveParams, state: &JointMotionState) -> f64 {
    let raw = params.stiffness * (params.target_position - state.position)
        + params.damping * (params.target_velocity - state.velocity);
    raw.clamp(-params.force_limit, params.force_limit)
}

/// One semi-implicit Euler step: velocity first, then position with the new
/// velocity.
pub fn step(state: &JointMotionState, params: &DriveParams, dt: f64) -> Result<JointMotionState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let accel = drive_effect(params, state) / params.inertia;
    let velocity = state.velocity + accel * dt;
    let position = state.position + velocity * dt;
    if position.is_finite() && velocity.is_finite() {
        Ok(JointMotionState { position, velocity })
    } else {
        Err(DynamicsError::NonFiniteState { position, velocity })
    }
}
