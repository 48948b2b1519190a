use proptest::prelude::*;
use workbench_core::dynamics::*;

fn settle(dt: f64, seconds: f64) -> (JointMotionState, f64) {
    let params = DriveParams { target_position: 1.0, ..Default::default() };
    let mut s = JointMotionState::at_rest(0.0);
    let mut peak = f64::MIN;
    for _ in 0..(seconds / dt).round() as usize {
        s = step(&s, &params, dt).unwrap();
        peak = peak.max(s.position);
    }
    (s, peak)
}

/// Critically damped response from rest, ω = 10: `1 − (1 + 10t) e^{−10t}`.
fn closed_form(t: f64) -> f64 {
    1.0 - (1.0 + 10.0 * t) * (-10.0 * t).exp()
}

#[test]
fn critically_damped_settles_without_overshoot() {
    let (s, peak) = settle(1e-3, 5.0);
    assert!((s.position - 1.0).abs() < 1e-3);
    assert!(peak <= 1.0 + 1e-6, "{peak}");
}

#[test]
fn tracks_closed_form() {
    let params = DriveParams { target_position: 1.0, ..Default::default() };
    let mut s = JointMotionState::at_rest(0.0);
    for k in 1..=1000 {
        s = step(&s, &params, 1e-3).unwrap();
        assert!((s.position - closed_form(k as f64 * 1e-3)).abs() < 5e-3);
    }
}

#[test]
fn first_order_convergence() {
    let err = |dt: f64| (settle(dt, 1.0).0.position - closed_form(1.0)).abs();
    let ratio = err(1e-3) / err(5e-4);
    assert!((1.5..=2.5).contains(&ratio), "{ratio}");
}

proptest! {
    #[test]
    fn equilibrium_is_a_fixed_point(
        target in -10.0f64..10.0,
        stiffness in 0.0f64..1e4,
        damping in 0.0f64..1e3,
        inertia in 0.01f64..100.0,
    ) {
        let params = DriveParams { stiffness, damping, inertia, target_position: target, ..Default::default() };
        let s = JointMotionState::at_rest(target);
        prop_assert_eq!(step(&s, &params, 1e-3).unwrap(), s);
    }

    #[test]
    fn effect_never_exceeds_force_limit(
        limit in 0.0f64..100.0,
        p in -5.0f64..5.0,
        v in -5.0f64..5.0,
        target in -5.0f64..5.0,
    ) {
        let params = DriveParams { force_limit: limit, target_position: target, ..Default::default() };
        let state = JointMotionState { position: p, velocity: v };
        prop_assert!(drive_effect(&params, &state).abs() <= limit);
    }

    #[test]
    fn critically_damped_is_monotone(stiffness in 1.0f64..2000.0, inertia in 0.1f64..10.0, target in -3.0f64..3.0) {
        let damping = 2.0 * (stiffness * inertia).sqrt();
        let params = DriveParams { stiffness, damping, inertia, target_position: target, force_limit: f64::INFINITY, ..Default::default() };
        let mut s = JointMotionState::at_rest(0.0);
        for _ in 0..3000 {
            let next = step(&s, &params, 1e-3).unwrap();
            prop_assert!((next.position - target) * target.signum() <= 1e-6 * target.abs().max(1.0));
            s = next;
        }
    }
}
