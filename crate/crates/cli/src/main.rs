//! `workbench`: inspect robots, solve kinematics, train and roll out
//! movement primitives, replay recordings, run programs and host the server.
//!
//! Exit codes: 0 success, 1 usage, 2 unreadable or invalid input, 3 solver or
//! engine failure. Failures print one JSON line on stderr.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::{CliError, Floats, Out};

#[derive(Parser)]
#[command(name = "workbench", version, about = "Headless robot teaching workbench")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Also write a CSV table (fk, dmp rollout, replay).
    #[arg(long, global = true, value_name = "FILE")]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a URDF and summarize its kinematic chain.
    Validate {
        urdf: PathBuf,
        #[arg(long)]
        tip: Option<String>,
    },
    /// Forward kinematics from the root link to the tip.
    Fk {
        urdf: PathBuf,
        #[arg(long)]
        tip: Option<String>,
        /// Joint values in chain order.
        #[arg(long, allow_hyphen_values = true, value_parser = output::floats)]
        q: Floats,
    },
    /// Inverse kinematics for a tip pose in the root frame.
    Ik(IkArgs),
    /// Dynamic movement primitives.
    #[command(subcommand)]
    Dmp(DmpCommand),
    /// Play a trajectory on a scene robot and measure tracking.
    Replay {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        /// Robot id; defaults to the first robot in the scene.
        #[arg(long)]
        robot: Option<String>,
        /// Include per-joint errors.
        #[arg(long)]
        report: bool,
    },
    /// Serve the WebSocket protocol.
    Serve {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Listen address; overrides WORKBENCH_ADDR.
        #[arg(long)]
        addr: Option<String>,
        /// Artifact directory; overrides WORKBENCH_DATA.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Teach-pendant programs.
    #[command(subcommand)]
    Program(ProgramCommand),
}

#[derive(Args)]
struct IkArgs {
    urdf: PathBuf,
    #[arg(long)]
    tip: Option<String>,
    #[arg(long, allow_hyphen_values = true, value_parser = output::triple)]
    pos: [f64; 3],
    /// Fixed-axis roll, pitch, yaw. Omit to solve for position only.
    #[arg(long, allow_hyphen_values = true, value_parser = output::triple)]
    rpy: Option<[f64; 3]>,
    /// Initial guess; defaults to zeros clamped to the limits.
    #[arg(long, allow_hyphen_values = true, value_parser = output::floats)]
    seed: Option<Floats>,
}

#[derive(Subcommand)]
enum DmpCommand {
    /// Fit a model to a recorded trajectory.
    Train {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_basis: Option<usize>,
        /// Spring constant; damping follows as 2√k.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        width_scale: Option<f64>,
    },
    /// Integrate a model toward a new goal.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true, value_parser = output::floats)]
        goal: Floats,
        /// Start; defaults to the demonstration start.
        #[arg(long, allow_hyphen_values = true, value_parser = output::floats)]
        start: Option<Floats>,
        /// Duration in seconds; defaults to the demonstration duration.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProgramCommand {
    /// Run a program to completion in a scene.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        robot: Option<String>,
        /// Simulated-time budget in seconds.
        #[arg(long, default_value_t = 120.0)]
        max_time: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let message: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            return fail(CliError::Usage(message.join(" ").trim_start_matches("error: ").to_owned()));
        }
    };
    let out = Out { json: cli.json, csv: cli.csv.clone() };
    match run(cli.command, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json_line());
    ExitCode::from(e.exit_code() as u8)
}

fn run(command: Command, out: &Out) -> Result<(), CliError> {
    match command {
        Command::Validate { urdf, tip } => commands::validate(&urdf, tip.as_deref(), out),
        Command::Fk { urdf, tip, q } => commands::fk(&urdf, tip.as_deref(), &q.0, out),
        Command::Ik(a) => commands::ik(&a.urdf, a.tip.as_deref(), a.pos, a.rpy, a.seed.as_ref().map(|s| s.0.as_slice()), out),
        Command::Dmp(DmpCommand::Train { demo, out: path, n_basis, k, width_scale }) => {
            commands::dmp_train(&demo, &path, n_basis, k, width_scale, out)
        }
        Command::Dmp(DmpCommand::Rollout { model, goal, start, tau, dt, out: path }) => {
            commands::dmp_rollout(&model, &goal.0, start.as_ref().map(|s| s.0.as_slice()), tau, dt, &path, out)
        }
        Command::Replay { scene, traj, robot, report } => commands::replay(&scene, &traj, robot.as_deref(), report, out),
        Command::Serve { scene, addr, data } => commands::serve(scene, addr, data),
        Command::Program(ProgramCommand::Run { scene, program, robot, max_time }) => {
            commands::program_run(&scene, &program, robot.as_deref(), max_time, out)
        }
    }
}
