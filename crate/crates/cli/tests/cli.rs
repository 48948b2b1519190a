use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(rel: &str) -> String {
    root().join("fixtures").join(rel).to_string_lossy().into_owned()
}

fn workbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_workbench")).args(args).output().unwrap()
}

fn json_ok(args: &[&str]) -> Value {
    let out = workbench(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Exit code plus the parsed one-line error on stderr.
fn failure(args: &[&str]) -> (i32, Value) {
    let out = workbench(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    (out.status.code().unwrap(), serde_json::from_str(&stderr).unwrap())
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn validate_reports_chain_dof() {
    let v = json_ok(&["validate", &fixture("urdf/ur5e.urdf"), "--json"]);
    assert_eq!(v["dof"], 6);
    assert_eq!(v["tip"], "tool0");
    let v = json_ok(&["validate", &fixture("urdf/planar2.urdf"), "--json"]);
    assert_eq!(v["dof"], 2);
}

#[test]
fn fk_matches_planar_closed_form() {
    let v = json_ok(&["fk", &fixture("urdf/planar2.urdf"), "--q", "0,0", "--json"]);
    assert_eq!(floats(&v["pose"]["xyz"]), vec![2.0, 0.0, 0.0]);
    let (a, b) = (0.5f64, -0.3f64);
    let v = json_ok(&["fk", &fixture("urdf/planar2.urdf"), "--q", "0.5,-0.3", "--json"]);
    let xyz = floats(&v["pose"]["xyz"]);
    assert!((xyz[0] - (a.cos() + (a + b).cos())).abs() < 1e-12);
    assert!((xyz[1] - (a.sin() + (a + b).sin())).abs() < 1e-12);
}

#[test]
fn fk_writes_csv_in_chain_order() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("fk.csv");
    json_ok(&["fk", &fixture("urdf/planar2.urdf"), "--q", "0,0", "--json", "--csv", csv.to_str().unwrap()]);
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,joint1,joint2,x,y,z,qx,qy,qz,qw");
    assert_eq!(lines.next().unwrap(), "0,0,0,2,0,0,0,0,0,1");
}

#[test]
fn ik_solution_lands_on_target() {
    let v = json_ok(&["ik", &fixture("urdf/planar2.urdf"), "--pos", "1,1,0", "--json"]);
    assert_eq!(v["converged"], true);
    let q = floats(&v["q"]);
    let arg = format!("{},{}", q[0], q[1]);
    let fk = json_ok(&["fk", &fixture("urdf/planar2.urdf"), "--q", &arg, "--json"]);
    let xyz = floats(&fk["pose"]["xyz"]);
    assert!((xyz[0] - 1.0).abs() < 1e-4 && (xyz[1] - 1.0).abs() < 1e-4, "{xyz:?}");

    let v = json_ok(&[
        "ik",
        &fixture("urdf/ur5e.urdf"),
        "--tip",
        "tool0",
        "--pos",
        "0.4,-0.1,0.3",
        "--rpy",
        "3.14159,0,0",
        "--seed",
        "0,-1.57,1.57,-1.57,-1.57,0",
        "--json",
    ]);
    assert_eq!(v["converged"], true);
    assert!(v["residual"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn unreachable_ik_exits_with_solver_failure() {
    let (code, err) = failure(&["ik", &fixture("urdf/planar2.urdf"), "--pos", "5,0,0"]);
    assert_eq!(code, 3);
    assert_eq!(err["error"]["kind"], "failed");
}

#[test]
fn dmp_rollout_reaches_requested_goal() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("reach.dmp.json");
    let traj = dir.path().join("out.traj.jsonl");
    let csv = dir.path().join("out.csv");
    let trained = json_ok(&["dmp", "train", "--demo", &fixture("demos/ur5e_reach.traj.jsonl"), "--out", model.to_str().unwrap(), "--json"]);
    assert_eq!(trained["dof"], 6);
    assert_eq!(trained["tau"], 2.0);

    let goal = [0.3, -1.4, 1.2, -1.5, -1.57, -0.2];
    let goal_arg = goal.map(|g| g.to_string()).join(",");
    let v = json_ok(&[
        "dmp",
        "rollout",
        "--model",
        model.to_str().unwrap(),
        "--goal",
        &goal_arg,
        "--out",
        traj.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--json",
    ]);
    for (e, g) in floats(&v["endpoint"]).iter().zip(goal) {
        assert!((e - g).abs() < 1e-3, "{e} vs {g}");
    }
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,dof_0,dof_1,dof_2,dof_3,dof_4,dof_5");
    assert_eq!(text.lines().count(), 1 + v["samples"].as_u64().unwrap() as usize);
    assert!(traj.exists());
}

#[test]
fn replay_tracks_shipped_demo() {
    let v = json_ok(&[
        "replay",
        "--scene",
        &fixture("scenes/ur5e_cube.json"),
        "--traj",
        &fixture("demos/ur5e_reach.traj.jsonl"),
        "--report",
        "--json",
    ]);
    assert_eq!(v["samples"], 201);
    assert!(v["max_error"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["joints"].as_array().unwrap().len(), 6);
    assert_eq!(v["gripper"], "closed");
}

#[test]
fn pick_and_place_program_moves_the_cube() {
    let v = json_ok(&[
        "program",
        "run",
        "--scene",
        &fixture("scenes/ur5e_cube.json"),
        "--program",
        &fixture("programs/pick_place.json"),
        "--json",
    ]);
    assert_eq!(v["completed"], true);
    let cube = floats(&v["objects"][0]["pose"]["xyz"]);
    let target = [0.45, -0.25, 0.05];
    let off: f64 = cube.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(off < 5e-3, "{cube:?}");
}

#[test]
fn json_output_is_byte_identical_across_runs() {
    let args = [
        "program",
        "run",
        "--scene",
        &fixture("scenes/ur5e_cube.json"),
        "--program",
        &fixture("programs/pick_place.json"),
        "--json",
    ];
    assert_eq!(workbench(&args).stdout, workbench(&args).stdout);
    let args = ["replay", "--scene", &fixture("scenes/ur5e_cube.json"), "--traj", &fixture("demos/ur5e_reach.traj.jsonl"), "--json"];
    assert_eq!(workbench(&args).stdout, workbench(&args).stdout);
}

#[test]
fn unreachable_program_step_is_an_engine_failure() {
    let dir = tempfile::tempdir().unwrap();
    let program = dir.path().join("far.json");
    std::fs::write(&program, r#"[{"move_to_pose": {"xyz": [3, 0, 0.5]}}]"#).unwrap();
    let (code, err) = failure(&["program", "run", "--scene", &fixture("scenes/ur5e_cube.json"), "--program", program.to_str().unwrap(), "--json"]);
    assert_eq!(code, 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("step 0"));
}

#[test]
fn usage_and_input_errors_have_distinct_exit_codes() {
    let (code, err) = failure(&["fk"]);
    assert_eq!(code, 1);
    assert_eq!(err["error"]["kind"], "usage");
    assert_eq!(failure(&["fk", &fixture("urdf/planar2.urdf"), "--q", "1,x"]).0, 1);
    assert_eq!(failure(&["frobnicate"]).0, 1);

    let (code, err) = failure(&["validate", "/nonexistent/robot.urdf"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["kind"], "invalid_input");
    assert_eq!(failure(&["fk", &fixture("urdf/planar2.urdf"), "--q", "1"]).0, 2);
    assert_eq!(failure(&["validate", &fixture("urdf/invalid/cycle.urdf")]).0, 2);

    let dir = tempfile::tempdir().unwrap();
    let program = dir.path().join("bad.json");
    std::fs::write(&program, r#"[{"fly_to": 1}]"#).unwrap();
    assert_eq!(failure(&["program", "run", "--scene", &fixture("scenes/ur5e_cube.json"), "--program", program.to_str().unwrap()]).0, 2);
}

#[test]
fn help_exits_cleanly() {
    let out = workbench(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay"));
}

#[test]
fn serve_reports_busy_address() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = failure(&["serve", "--addr", &addr, "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("cannot bind"));
}
