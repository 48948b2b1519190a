use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use workbench_core::dmp::{self, DmpConfig, DmpModel};
use workbench_core::kinematics::{forward_kinematics, solve_ik, IkOptions, KinematicsError, Pose};
use workbench_core::trajectory;
use workbench_core::urdf::{build_chain, parse_urdf, JointChain, RobotModel};
use workbench_core::workspace::{Event, PoseRecord, Program, Workspace, WorkspaceError};
use workbench_server::{ServerConfig, ServerError};

use crate::output::{self, fmt_vec, invalid, CliError, Out};

fn load_chain(path: &Path, tip: Option<&str>) -> Result<(RobotModel, JointChain), CliError> {
    let model = parse_urdf(&output::read(path)?).map_err(|e| invalid(path, e))?;
    let tip = tip.map(str::to_owned).unwrap_or_else(|| model.deepest_leaf().to_owned());
    let chain = build_chain(&model, &model.root_link, &tip).map_err(|e| invalid(path, e))?;
    Ok((model, chain))
}

fn pose_json(pose: &Pose) -> Value {
    let (r, p, y) = pose.rotation.euler_angles();
    let q = pose.rotation.quaternion();
    json!({
        "xyz": <[f64; 3]>::from(pose.translation.vector),
        "quat": [q.i, q.j, q.k, q.w],
        "rpy": [r, p, y],
    })
}

fn pose_text(pose: &Pose) -> String {
    let (r, p, y) = pose.rotation.euler_angles();
    format!("position {}  rpy {}", fmt_vec(pose.translation.vector.as_slice()), fmt_vec(&[r, p, y]))
}

fn check_dof(expected: usize, found: usize, what: &str) -> Result<(), CliError> {
    if expected == found {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{what} has {found} values, expected {expected}")))
    }
}

pub fn validate(path: &Path, tip: Option<&str>, out: &Out) -> Result<(), CliError> {
    let (model, chain) = load_chain(path, tip)?;
    let joints: Vec<Value> = chain
        .actuated()
        .map(|j| {
            json!({
                "name": j.name,
                "kind": j.kind.as_str(),
                "lower": j.limits.as_ref().map(|l| l.lower),
                "upper": j.limits.as_ref().map(|l| l.upper),
            })
        })
        .collect();
    let links = chain.link_names();
    let tip = links.last().cloned().unwrap_or_default();
    let value = json!({
        "name": model.name,
        "dof": chain.dof(),
        "root": model.root_link,
        "tip": tip,
        "links": model.links.len(),
        "joints": joints,
    });
    out.emit(&value, || {
        format!(
            "{}: {} dof, {} links, {} joints, chain {} -> {}\n",
            model.name,
            chain.dof(),
            model.links.len(),
            model.joints.len(),
            model.root_link,
            tip
        )
    });
    Ok(())
}

pub fn fk(path: &Path, tip: Option<&str>, q: &[f64], out: &Out) -> Result<(), CliError> {
    let (_, chain) = load_chain(path, tip)?;
    check_dof(chain.dof(), q.len(), "--q")?;
    let fk = forward_kinematics(&chain, q).map_err(|e| CliError::Invalid(e.to_string()))?;
    let value = json!({ "q": q, "pose": pose_json(&fk.ee) });
    out.emit(&value, || format!("{}\n", pose_text(&fk.ee)));
    let mut header = chain.joint_names();
    header.extend(["x", "y", "z", "qx", "qy", "qz", "qw"].map(String::from));
    let rot = fk.ee.rotation.quaternion();
    let mut row = q.to_vec();
    row.extend(fk.ee.translation.vector.iter());
    row.extend([rot.i, rot.j, rot.k, rot.w]);
    out.csv(&header, [(0.0, row)])
}

pub fn ik(
    path: &Path,
    tip: Option<&str>,
    pos: [f64; 3],
    rpy: Option<[f64; 3]>,
    seed: Option<&[f64]>,
    out: &Out,
) -> Result<(), CliError> {
    let (_, chain) = load_chain(path, tip)?;
    let seed = match seed {
        Some(s) => {
            check_dof(chain.dof(), s.len(), "--seed")?;
            s.to_vec()
        }
        None => {
            let mut q = vec![0.0; chain.dof()];
            chain.clamp(&mut q);
            q
        }
    };
    let target = PoseRecord { xyz: pos, rpy, quat: None }.to_pose();
    let mut opts = IkOptions::default();
    if rpy.is_none() {
        opts.orientation_weight = 0.0;
    }
    let result = match solve_ik(&chain, &target, &seed, &opts) {
        Ok(r) | Err(KinematicsError::Unreachable(r)) => r,
        Err(e) => return Err(CliError::Invalid(e.to_string())),
    };
    let reached = forward_kinematics(&chain, &result.q).map_err(|e| CliError::Failed(e.to_string()))?.ee;
    let value = json!({
        "converged": result.converged,
        "q": result.q,
        "residual": result.residual,
        "iterations": result.iterations,
        "pose": pose_json(&reached),
    });
    out.emit(&value, || {
        format!(
            "q {}\nresidual {:.3e} after {} iterations{}\n{}\n",
            fmt_vec(&result.q),
            result.residual,
            result.iterations,
            if result.converged { "" } else { " (not converged)" },
            pose_text(&reached)
        )
    });
    if result.converged {
        Ok(())
    } else {
        Err(CliError::Failed(format!("no solution within tolerance; best residual {:.3e}", result.residual)))
    }
}

pub fn dmp_train(
    demo: &Path,
    model_path: &Path,
    n_basis: Option<usize>,
    k: Option<f64>,
    width_scale: Option<f64>,
    out: &Out,
) -> Result<(), CliError> {
    let traj = trajectory::load_file(demo).map_err(|e| invalid(demo, e))?;
    let mut config = k.map(DmpConfig::with_stiffness).unwrap_or_default();
    if let Some(n) = n_basis {
        config.n_basis = n;
    }
    if let Some(w) = width_scale {
        config.width_scale = w;
    }
    let model = dmp::train(&traj, &config).map_err(|e| invalid(demo, e))?;
    output::write(model_path, &model.to_json())?;
    let value = json!({
        "dof": model.dof(),
        "tau": model.tau,
        "n_basis": model.config.n_basis,
        "start": model.start(),
        "goal": model.goal(),
    });
    out.emit(&value, || {
        format!(
            "trained {} dof over {:.3} s with {} basis functions -> {}\n",
            model.dof(),
            model.tau,
            model.config.n_basis,
            model_path.display()
        )
    });
    Ok(())
}

pub fn dmp_rollout(
    model_path: &Path,
    goal: &[f64],
    start: Option<&[f64]>,
    tau: Option<f64>,
    dt: f64,
    traj_path: &Path,
    out: &Out,
) -> Result<(), CliError> {
    let model = DmpModel::from_json(&output::read(model_path)?).map_err(|e| invalid(model_path, e))?;
    check_dof(model.dof(), goal.len(), "--goal")?;
    let start = start.map(<[f64]>::to_vec).unwrap_or_else(|| model.start());
    check_dof(model.dof(), start.len(), "--start")?;
    let tau = tau.unwrap_or(model.tau);
    if !(tau > 0.0 && tau.is_finite() && dt > 0.0 && dt.is_finite()) {
        return Err(CliError::Invalid(format!("tau and dt must be positive, got {tau} and {dt}")));
    }
    let traj = dmp::rollout(&model, &start, goal, tau, dt).map_err(|e| CliError::Failed(e.to_string()))?;
    trajectory::save_file(&traj, traj_path).map_err(|e| CliError::Failed(format!("{}: {e}", traj_path.display())))?;
    let end = traj.samples().last().map(|s| s.q.clone()).unwrap_or_default();
    let error = end.iter().zip(goal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let value = json!({
        "samples": traj.len(),
        "duration": traj.duration(),
        "start": start,
        "goal": goal,
        "endpoint": end,
        "endpoint_error": error,
    });
    out.emit(&value, || {
        format!(
            "{} samples over {:.3} s, endpoint {} (max error {:.2e}) -> {}\n",
            traj.len(),
            traj.duration(),
            fmt_vec(&end),
            error,
            traj_path.display()
        )
    });
    out.csv(&traj.meta.joint_names, traj.samples().iter().map(|s| (s.t, s.q.clone())))
}

fn scene_error(path: &Path, e: WorkspaceError) -> CliError {
    invalid(path, e)
}

/// Errors from valid input going wrong at run time exit 3; malformed or
/// mismatched input exits 2.
fn engine_error(e: WorkspaceError) -> CliError {
    match e {
        WorkspaceError::DimensionMismatch { .. }
        | WorkspaceError::EmptyProgram
        | WorkspaceError::Trajectory(_)
        | WorkspaceError::UnknownRobot(_) => CliError::Invalid(e.to_string()),
        e => CliError::Failed(e.to_string()),
    }
}

fn robot_index(ws: &Workspace, robot: Option<&str>) -> Result<usize, CliError> {
    match robot {
        Some(id) => ws.robots.iter().position(|r| r.id == id).ok_or_else(|| engine_error(WorkspaceError::UnknownRobot(id.into()))),
        None if ws.robots.is_empty() => Err(CliError::Invalid("scene has no robots".into())),
        None => Ok(0),
    }
}

pub fn replay(scene: &Path, traj_path: &Path, robot: Option<&str>, report: bool, out: &Out) -> Result<(), CliError> {
    let mut ws = Workspace::load_scene(scene).map_err(|e| scene_error(scene, e))?;
    let traj = trajectory::load_file(traj_path).map_err(|e| invalid(traj_path, e))?;
    let index = robot_index(&ws, robot)?;
    let id = ws.robots[index].id.clone();
    let dt = ws.sim_dt;
    let handle = ws.play(&id, traj.clone()).map_err(engine_error)?;

    // each sample is compared at the tick nearest its time
    let due: Vec<u64> = traj.samples().iter().map(|s| (s.t / dt).round() as u64).collect();
    let budget = due.last().copied().unwrap_or(0) + (ws.settle.timeout / dt).ceil() as u64 + 1;
    let dof = traj.dof();
    let mut worst = vec![0.0f64; dof];
    let mut sum_sq = 0.0;
    let mut next = 0;
    let mut rows = Vec::new();
    let mut ticks = 0u64;
    let mut done = false;
    loop {
        let q = ws.robots[index].q();
        if out.csv.is_some() {
            rows.push((ticks as f64 * dt, q.clone()));
        }
        while next < due.len() && due[next] <= ticks {
            for (j, (a, b)) in q.iter().zip(&traj.samples()[next].q).enumerate() {
                worst[j] = worst[j].max((a - b).abs());
                sum_sq += (a - b) * (a - b);
            }
            next += 1;
        }
        if done {
            break;
        }
        if ticks >= budget {
            return Err(CliError::Failed(format!("playback did not finish within {budget} ticks")));
        }
        let events = ws.tick().map_err(engine_error)?;
        ticks += 1;
        done = events.contains(&Event::PlaybackDone { robot: id.clone(), handle });
    }
    let max_error = worst.iter().copied().fold(0.0, f64::max);
    let rms = (sum_sq / (next * dof).max(1) as f64).sqrt();
    let gripper = ws.robots[index].gripper.state;
    let joint_names = ws.robots[index].chain.joint_names();
    let mut value = json!({
        "robot": id,
        "samples": next,
        "ticks": ticks,
        "duration": ticks as f64 * dt,
        "max_error": max_error,
        "rms_error": rms,
        "gripper": gripper,
    });
    if report {
        value["joints"] = joint_names.iter().zip(&worst).map(|(n, e)| json!({ "name": n, "max_error": e })).collect();
    }
    out.emit(&value, || {
        let mut text = format!(
            "replayed {next} samples on `{id}` in {ticks} ticks ({:.3} s): max error {max_error:.3e} rad, rms {rms:.3e} rad\n",
            ticks as f64 * dt
        );
        if report {
            for (n, e) in joint_names.iter().zip(&worst) {
                text.push_str(&format!("  {n:<24} {e:.3e}\n"));
            }
        }
        text
    });
    out.csv(&joint_names, rows)
}

pub fn program_run(scene: &Path, program_path: &Path, robot: Option<&str>, max_time: f64, out: &Out) -> Result<(), CliError> {
    let mut ws = Workspace::load_scene(scene).map_err(|e| scene_error(scene, e))?;
    let program = Program::from_json(&output::read(program_path)?).map_err(|e| invalid(program_path, e))?;
    let index = robot_index(&ws, robot)?;
    let id = ws.robots[index].id.clone();
    let handle = ws.run_program(&id, program).map_err(engine_error)?;
    let budget = (max_time / ws.sim_dt).ceil() as u64;

    let mut log = Vec::new();
    let mut outcome = None;
    for _ in 0..budget {
        for event in ws.tick().map_err(engine_error)? {
            let finished = match &event {
                Event::ProgramDone { handle: h, .. } if *h == handle => Some(Ok(())),
                Event::ProgramAborted { handle: h, step, reason, .. } if *h == handle => {
                    Some(Err(CliError::Failed(format!("step {step}: {reason}"))))
                }
                _ => None,
            };
            log.push((ws.tick_count, event));
            if finished.is_some() {
                outcome = finished;
            }
        }
        if outcome.is_some() {
            break;
        }
    }
    let outcome = outcome.unwrap_or_else(|| Err(CliError::Failed(format!("program still running after {max_time} s"))));

    let r = &ws.robots[index];
    let objects: Vec<Value> = ws
        .objects
        .iter()
        .map(|o| json!({ "id": o.id, "pose": pose_json(&o.pose), "attached_to": o.attached_to }))
        .collect();
    let value = json!({
        "robot": id,
        "completed": outcome.is_ok(),
        "ticks": ws.tick_count,
        "time": ws.time(),
        "events": log.iter().map(|(tick, e)| json!({ "tick": tick, "event": e })).collect::<Vec<_>>(),
        "q": r.q(),
        "ee_pose": pose_json(&r.ee_pose()),
        "objects": objects,
    });
    out.emit(&value, || {
        let mut text = String::new();
        for (tick, e) in &log {
            let line = match e {
                Event::ProgramStepDone { step, .. } => format!("step {step} done"),
                Event::ProgramDone { .. } => "program done".into(),
                Event::ProgramAborted { step, reason, .. } => format!("aborted at step {step}: {reason}"),
                Event::PlaybackDone { .. } => "playback done".into(),
            };
            text.push_str(&format!("{:>9.3} s  {line}\n", *tick as f64 * ws.sim_dt));
        }
        text.push_str(&format!("end effector {}\n", pose_text(&r.ee_pose())));
        for o in &ws.objects {
            text.push_str(&format!("object {} at {}\n", o.id, fmt_vec(o.pose.translation.vector.as_slice())));
        }
        text
    });
    outcome
}

pub fn serve(scene: Option<PathBuf>, addr: Option<String>, data: Option<PathBuf>) -> Result<(), CliError> {
    let mut config = ServerConfig::from_env();
    if scene.is_some() {
        config.scene = scene;
    }
    if let Some(a) = addr {
        config.addr = a;
    }
    if let Some(d) = data {
        config.data_dir = d;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
    runtime.block_on(async {
        let server = workbench_server::serve(&config).await.map_err(|e| match e {
            ServerError::Scene(_) => CliError::Invalid(e.to_string()),
            e => CliError::Failed(e.to_string()),
        })?;
        eprintln!("listening on ws://{}", server.local_addr());
        let _ = tokio::signal::ctrl_c().await;
        server.shutdown();
        Ok(())
    })
}
