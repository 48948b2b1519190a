use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use workbench_core::trajectory::*;

fn round_trip(traj: &Trajectory) -> Trajectory {
    let mut buf = Vec::new();
    save(traj, &mut buf).unwrap();
    load(buf.as_slice()).unwrap()
}

fn bits(traj: &Trajectory) -> Vec<u64> {
    traj.samples()
        .iter()
        .flat_map(|s| std::iter::once(s.t).chain(s.q.iter().copied()).chain(s.qd.iter().flatten().copied()))
        .map(f64::to_bits)
        .collect()
}

fn random_trajectory(rng: &mut ChaCha8Rng, dof: usize, len: usize) -> Trajectory {
    let meta = TrajectoryMeta {
        robot: "ur5e".into(),
        joint_names: (0..dof).map(|i| format!("joint_{i}")).collect(),
        created_at: Some("2026-01-01T00:00:00Z".into()),
    };
    let mut t = 0.0;
    let samples: Vec<TrajectorySample> = (0..len)
        .map(|k| {
            if k > 0 {
                t += rng.gen_range(1e-4..0.05);
            }
            TrajectorySample {
                t,
                q: (0..dof).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(8)).collect(),
                qd: (k % 3 != 0).then(|| (0..dof).map(|_| rng.gen_range(-10.0..10.0)).collect()),
                gripper: match k % 4 {
                    0 => None,
                    1 => Some(GripperState::Open),
                    _ => Some(GripperState::Closed),
                },
            }
        })
        .collect();
    Trajectory::from_samples(dof, meta, samples).unwrap()
}

#[test]
fn thousand_sample_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let traj = random_trajectory(&mut rng, 6, 1000);
    let back = round_trip(&traj);
    assert_eq!(bits(&back), bits(&traj));
    assert_eq!(back, traj);
}

#[test]
fn differentiation_is_exact_for_quadratics_on_uneven_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = 0.0;
    let times: Vec<f64> = (0..50)
        .map(|k| {
            if k > 0 {
                t += rng.gen_range(0.005..0.05);
            }
            t
        })
        .collect();
    let q = |t: f64| 0.3 - 1.7 * t + 2.5 * t * t;
    let traj = Trajectory::from_samples(1, TrajectoryMeta::default(), times.iter().map(|&t| TrajectorySample::new(t, vec![q(t)]))).unwrap();
    let (v, a) = differentiate(&traj).unwrap();
    for (i, &t) in times.iter().enumerate() {
        assert!((v[i][0] - (-1.7 + 5.0 * t)).abs() < 1e-8, "v at {i}");
        assert!((a[i][0] - 5.0).abs() < 1e-6, "a at {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_round_trip(seed in any::<u64>(), dof in 1usize..8, len in 1usize..60) {
        let traj = random_trajectory(&mut ChaCha8Rng::seed_from_u64(seed), dof, len);
        let back = round_trip(&traj);
        prop_assert_eq!(bits(&back), bits(&traj));
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn resample_keeps_endpoints_and_grid(seed in any::<u64>(), len in 2usize..40, dt in 1e-3f64..0.1) {
        let traj = random_trajectory(&mut ChaCha8Rng::seed_from_u64(seed), 3, len);
        let out = resample(&traj, dt).unwrap();
        let (first, last) = (&out.samples()[0], &out.samples()[out.len() - 1]);
        prop_assert_eq!(&first.q, &traj.samples()[0].q);
        prop_assert_eq!(&last.q, &traj.samples()[traj.len() - 1].q);
        prop_assert_eq!(last.t, traj.duration());
        for (k, s) in out.samples()[..out.len() - 1].iter().enumerate() {
            prop_assert_eq!(s.t, k as f64 * dt);
        }
    }

    #[test]
    fn smoothing_preserves_constants(value in -5.0f64..5.0, len in 1usize..30, half in 0usize..6) {
        let traj = Trajectory::from_samples(
            1,
            TrajectoryMeta::default(),
            (0..len).map(|k| TrajectorySample::new(k as f64 * 0.01, vec![value])),
        ).unwrap();
        let out = smooth(&traj, 2 * half + 1).unwrap();
        for s in out.samples() {
            prop_assert!((s.q[0] - value).abs() <= 1e-12 * value.abs().max(1.0));
        }
    }
}
