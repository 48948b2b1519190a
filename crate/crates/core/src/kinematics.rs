//! Forward kinematics, geometric Jacobian, damped-least-squares IK and
//! joint-space interpolation over a [`JointChain`].

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Trajectory, TrajectoryMeta, TrajectorySample};
use crate::urdf::{Joint, JointChain, JointKind};

/// Rigid transform: translation in meters plus unit-quaternion rotation.
pub type Pose = Isometry3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target unreachable: best residual {:.6} after {} iterations", .0.residual, .0.iterations)]
    Unreachable(IkResult),
    #[error("joint {0} has a zero or missing velocity limit")]
    ZeroVelocityLimit(usize),
    #[error("interpolation step must be positive, got {0}")]
    InvalidStep(f64),
}

fn check_dim(chain: &JointChain, q: &[f64]) -> Result<(), KinematicsError> {
    if q.len() == chain.dof() {
        Ok(())
    } else {
        Err(KinematicsError::DimensionMismatch { expected: chain.dof(), found: q.len() })
    }
}

/// Transform from the joint's parent link to its child link at coordinate `qi`.
pub fn joint_transform(joint: &Joint, qi: f64) -> Pose {
    let origin = joint.origin.to_isometry();
    match joint.kind {
        JointKind::Fixed => origin,
        JointKind::Revolute | JointKind::Continuous => {
            let axis = nalgebra::Unit::new_normalize(joint.axis_vector());
            origin * Isometry3::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&axis, qi))
        }
        JointKind::Prismatic => {
            origin * Isometry3::from_parts(Translation3::from(joint.axis_vector() * qi), UnitQuaternion::identity())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub ee: Pose,
    /// Base link first, then the child link of every chain segment.
    pub link_poses: Vec<Pose>,
}

/// Poses are expressed in the chain's base-link frame.
pub fn forward_kinematics(chain: &JointChain, q: &[f64]) -> Result<FkResult, KinematicsError> {
    check_dim(chain, q)?;
    let mut pose = Pose::identity();
    let mut link_poses = Vec::with_capacity(chain.segments.len() + 1);
    link_poses.push(pose);
    for seg in &chain.segments {
        let qi = seg.dof_index.map_or(0.0, |i| q[i]);
        pose *= joint_transform(&seg.joint, qi);
        link_poses.push(pose);
    }
    Ok(FkResult { ee: pose, link_poses })
}

pub fn end_effector(chain: &JointChain, q: &[f64]) -> Result<Pose, KinematicsError> {
    forward_kinematics(chain, q).map(|fk| fk.ee)
}

/// 6×dof geometric Jacobian in the base frame; rows are linear xyz then
/// angular xyz.
pub fn jacobian(chain: &JointChain, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
    check_dim(chain, q)?;
    let mut jac = DMatrix::zeros(6, chain.dof());
    let mut pose = Pose::identity();
    let mut axes = Vec::with_capacity(chain.dof());
    for seg in &chain.segments {
        match seg.dof_index {
            Some(i) => {
                // joint axis lives in the frame after the origin transform
                let frame = pose * seg.joint.origin.to_isometry();
                let axis = frame.rotation * seg.joint.axis_vector().normalize();
                axes.push((i, seg.joint.kind, axis, frame.translation.vector));
                pose *= joint_transform(&seg.joint, q[i]);
            }
            None => pose *= joint_transform(&seg.joint, 0.0),
        }
    }
    let ee = pose.translation.vector;
    for (i, kind, axis, origin) in axes {
        if kind == JointKind::Prismatic {
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&axis);
        } else {
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&axis.cross(&(ee - origin)));
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkOptions {
    pub max_iter: usize,
    /// Convergence bound on `position_error + orientation_weight * angle`.
    pub tol: f64,
    pub damping: f64,
    /// Weight of the rotation angle (rad) against position error (m).
    /// Zero solves for position only.
    pub orientation_weight: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-4, damping: 0.05, orientation_weight: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkResult {
    pub q: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Position error (m) and rotation angle (rad) between `current` and `target`.
pub fn pose_error(current: &Pose, target: &Pose) -> (Vector3<f64>, Vector3<f64>) {
    let dp = target.translation.vector - current.translation.vector;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    (dp, dr)
}

pub fn ik_residual(current: &Pose, target: &Pose, orientation_weight: f64) -> f64 {
    let (dp, dr) = pose_error(current, target);
    dp.norm() + orientation_weight * dr.norm()
}

/// Largest per-joint change applied in one iteration (rad or m).
const MAX_STEP: f64 = 0.4;

/// Damped least squares: `dq = Jᵀ (J Jᵀ + λ² I)⁻¹ e`, clamped to joint limits
/// after every step. The first configuration within tolerance wins.
pub fn solve_ik(
    chain: &JointChain,
    target: &Pose,
    q0: &[f64],
    opts: &IkOptions,
) -> Result<IkResult, KinematicsError> {
    check_dim(chain, q0)?;
    let mut q = q0.to_vec();
    let position_only = opts.orientation_weight == 0.0;
    let rows = if position_only { 3 } else { 6 };
    let lambda2 = opts.damping * opts.damping;

    let mut best = IkResult { q: q.clone(), residual: f64::INFINITY, iterations: 0, converged: false };
    for iter in 0..=opts.max_iter {
        let ee = end_effector(chain, &q)?;
        let residual = ik_residual(&ee, target, opts.orientation_weight);
        if residual < best.residual {
            best = IkResult { q: q.clone(), residual, iterations: iter, converged: false };
        }
        if residual <= opts.tol {
            return Ok(IkResult { q, residual, iterations: iter, converged: true });
        }
        if iter == opts.max_iter || chain.dof() == 0 {
            break;
        }

        let (dp, dr) = pose_error(&ee, target);
        let mut err = DVector::zeros(rows);
        err.fixed_rows_mut::<3>(0).copy_from(&dp);
        let full = jacobian(chain, &q)?;
        let mut jac = full.rows(0, rows).into_owned();
        if !position_only {
            err.fixed_rows_mut::<3>(3).copy_from(&(dr * opts.orientation_weight));
            jac.rows_mut(3, 3).scale_mut(opts.orientation_weight);
        }

        let jjt = &jac * jac.transpose() + DMatrix::identity(rows, rows) * lambda2;
        let Some(solved) = jjt.cholesky().map(|c| c.solve(&err)) else {
            break;
        };
        let mut dq = jac.transpose() * solved;
        let largest = dq.amax();
        if largest > MAX_STEP {
            dq *= MAX_STEP / largest;
        }
        for (qi, d) in q.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
        chain.clamp(&mut q);
    }
    best.iterations = opts.max_iter;
    Err(KinematicsError::Unreachable(best))
}

/// Straight line in joint space, timed so the slowest joint runs at its
/// velocity limit. Samples every `dt`; the last sample lands exactly on
/// `q_to` at the full duration.
pub fn interpolate_joint_path(
    q_from: &[f64],
    q_to: &[f64],
    velocity_limits: &[f64],
    dt: f64,
) -> Result<Trajectory, KinematicsError> {
    let n = q_from.len();
    for len in [q_to.len(), velocity_limits.len()] {
        if len != n {
            return Err(KinematicsError::DimensionMismatch { expected: n, found: len });
        }
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(KinematicsError::InvalidStep(dt));
    }
    if let Some(i) = velocity_limits.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(KinematicsError::ZeroVelocityLimit(i));
    }

    let delta: Vec<f64> = q_from.iter().zip(q_to).map(|(a, b)| b - a).collect();
    let duration = delta
        .iter()
        .zip(velocity_limits)
        .map(|(d, v)| d.abs() / v)
        .fold(0.0, f64::max);

    let mut traj = Trajectory::new(n, TrajectoryMeta::default());
    let push = |traj: &mut Trajectory, t: f64, q: Vec<f64>| {
        traj.append(TrajectorySample::new(t, q)).expect("interpolated samples are ordered");
    };
    push(&mut traj, 0.0, q_from.to_vec());
    if duration == 0.0 {
        return Ok(traj);
    }
    let steps = (duration / dt).ceil() as usize;
    for k in 1..steps {
        let t = k as f64 * dt;
        if t >= duration {
            break;
        }
        let u = t / duration;
        push(&mut traj, t, q_from.iter().zip(&delta).map(|(a, d)| a + d * u).collect());
    }
    push(&mut traj, duration, q_to.to_vec());
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urdf::{build_chain, parse_urdf, JointLimits, Origin};
    use std::f64::consts::FRAC_PI_2;

    fn planar() -> JointChain {
        let xml = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/urdf/planar2.urdf")).unwrap();
        let m = parse_urdf(&xml).unwrap();
        build_chain(&m, "base", "tip").unwrap()
    }

    fn joint(kind: JointKind, axis: [f64; 3]) -> Joint {
        Joint {
            name: "j".into(),
            kind,
            parent: "a".into(),
            child: "b".into(),
            origin: Origin { xyz: [0.1, 0.2, 0.3], rpy: [0.0, 0.0, 0.0] },
            axis,
            limits: Some(JointLimits { lower: Some(-1.0), upper: Some(1.0), velocity: 1.0, effort: 1.0 }),
        }
    }

    #[test]
    fn revolute_zero_is_origin() {
        let j = joint(JointKind::Revolute, [0.0, 0.0, 1.0]);
        assert_eq!(joint_transform(&j, 0.0), j.origin.to_isometry());
    }

    #[test]
    fn prismatic_translates_along_axis() {
        let j = joint(JointKind::Prismatic, [0.0, 0.0, 1.0]);
        let p = joint_transform(&j, 0.3).translation.vector;
        assert!((p - Vector3::new(0.1, 0.2, 0.6)).norm() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let mut j = joint(JointKind::Revolute, [0.0, 0.0, 1.0]);
        j.origin = Origin::default();
        let p = joint_transform(&j, FRAC_PI_2) * nalgebra::Point3::new(1.0, 0.0, 0.0);
        assert!((p - nalgebra::Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn planar_fk_examples() {
        let c = planar();
        let pos = |q: [f64; 2]| forward_kinematics(&c, &q).unwrap().ee.translation.vector;
        assert!((pos([0.0, 0.0]) - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((pos([FRAC_PI_2, 0.0]) - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        assert!((pos([FRAC_PI_2, -FRAC_PI_2]) - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(
            forward_kinematics(&c, &[0.0]).unwrap_err(),
            KinematicsError::DimensionMismatch { expected: 2, found: 1 }
        );
        assert_eq!(forward_kinematics(&c, &[0.0, 0.0]).unwrap().link_poses.len(), 4);
    }

    #[test]
    fn prismatic_jacobian_column() {
        let j = joint(JointKind::Prismatic, [0.0, 0.0, 1.0]);
        let model = crate::urdf::RobotModel {
            name: "p".into(),
            links: ["a", "b"]
                .iter()
                .map(|n| crate::urdf::Link { name: (*n).into(), visuals: vec![], collision: None })
                .collect(),
            joints: vec![j],
            root_link: "a".into(),
        };
        let c = build_chain(&model, "a", "b").unwrap();
        let jac = jacobian(&c, &[0.2]).unwrap();
        assert_eq!(jac.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn planar_jacobian_at_zero() {
        let jac = jacobian(&planar(), &[0.0, 0.0]).unwrap();
        let col0 = jac.fixed_view::<3, 1>(0, 0);
        assert!((col0 - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ik_fixed_point_and_reachable() {
        let c = planar();
        let q0 = [0.3, 0.4];
        let target = end_effector(&c, &q0).unwrap();
        let r = solve_ik(&c, &target, &q0, &IkOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.q, q0.to_vec());

        let opts = IkOptions { orientation_weight: 0.0, ..Default::default() };
        let target = Pose::translation(1.0, 1.0, 0.0);
        let r = solve_ik(&c, &target, &[0.0, 0.0], &opts).unwrap();
        assert!(r.converged);
        let p = end_effector(&c, &r.q).unwrap().translation.vector;
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-4);
    }

    #[test]
    fn ik_unreachable_reports_best() {
        let c = planar();
        let target = Pose::translation(3.0, 0.0, 0.0);
        match solve_ik(&c, &target, &[0.0, 0.0], &IkOptions::default()) {
            Err(KinematicsError::Unreachable(best)) => {
                assert!(!best.converged);
                assert!((best.residual - 1.0).abs() < 0.05, "{}", best.residual);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interpolation_examples() {
        let single = interpolate_joint_path(&[0.4], &[0.4], &[1.0], 0.01).unwrap();
        assert_eq!(single.len(), 1);

        let t = interpolate_joint_path(&[0.0], &[1.0], &[0.5], 1e-3).unwrap();
        assert_eq!(t.duration(), 2.0);
        let mid = &t.samples()[1000];
        assert_eq!(mid.t, 1.0);
        assert!((mid.q[0] - 0.5).abs() < 1e-12);
        assert_eq!(t.samples().last().unwrap().q, vec![1.0]);

        let t = interpolate_joint_path(&[0.0, 0.0], &[1.0, 0.2], &[0.5, 0.5], 1e-3).unwrap();
        assert_eq!(t.duration(), 2.0);
        let s = &t.samples()[500];
        assert!((s.q[1] - 0.1 * s.t).abs() < 1e-12);

        assert_eq!(
            interpolate_joint_path(&[0.0], &[1.0], &[0.0], 1e-3).unwrap_err(),
            KinematicsError::ZeroVelocityLimit(0)
        );
        assert!(matches!(
            interpolate_joint_path(&[0.0], &[1.0, 2.0], &[1.0], 1e-3),
            Err(KinematicsError::DimensionMismatch { .. })
        ));
    }
}
