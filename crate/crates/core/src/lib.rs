//! Headless robot teaching engine.
//!
//! Robots are loaded from URDF, simulated with per-joint drives at a fixed
//! step, taught by dragging joints or the end effector, recorded as
//! trajectories and generalized with dynamic movement primitives.

pub mod dmp;
pub mod dynamics;
pub mod kinematics;
pub mod trajectory;
pub mod urdf;
pub mod workspace;
