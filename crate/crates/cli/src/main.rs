use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualkf::harness::{run_scenario, ExperimentConfig, Mode, SCHEMA_VERSION};
use dualkf::sysmodel::{burn_in_for_rate, simulate_trajectory};
use dualkf::{initial_gain, Error};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dualkf", version, about = "Kalman gain learning as optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed, overrides `seed0`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV and JSON artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reveal the noise covariances to the learner.
    #[arg(long, conflicts_with = "blind")]
    oracle: bool,
    /// Hide the noise covariances from the learner.
    #[arg(long)]
    blind: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one measurement trajectory of the configured model.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of history samples; the target sample is appended.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Discarded leading steps; derived from the model when omitted.
        #[arg(long)]
        burn_in: Option<usize>,
    },
    /// Steady-state Kalman gain from the Riccati iteration.
    Kalman(Common),
    /// Exact gradient descent (requires the covariances).
    Gd(Common),
    /// Euler-discretized gradient flow (requires the covariances).
    Gf(Common),
    /// Stochastic gradient descent from simulated data.
    Sgd(Common),
    /// Compare the analytic gradient with finite differences.
    GradCheck(Common),
    /// Verify the estimation/control duality identity.
    CheckDuality(Common),
    /// Run the configuration as written, over its full grid.
    Sweep(Common),
}

fn load(common: &Common, mode: Option<Mode>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = mode {
        cfg.mode = mode;
        if matches!(mode, Mode::Gd | Mode::Gf) && !common.blind {
            cfg.oracle = true;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed0 = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if common.oracle {
        cfg.oracle = true;
    }
    if common.blind {
        cfg.oracle = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(common: &Common, window: usize, burn_in: Option<usize>) -> Result<bool, Error> {
    let cfg = load(common, None)?;
    let model = cfg.model.load()?;
    let burn_in = match burn_in.or(cfg.burn_in) {
        Some(b) => b,
        None => burn_in_for_rate(initial_gain(&model.public())?.rho),
    };
    let traj = simulate_trajectory(&model, burn_in, window, cfg.seed0)?;
    let mut summary = json!({
        "schema_version": SCHEMA_VERSION,
        "window_length": traj.window_length,
        "burn_in": burn_in,
        "seed": cfg.seed0,
    });
    match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("trajectory.csv");
            traj.write_csv(fs::File::create(&path)?)?;
            summary["trajectory_file"] = json!(path);
        }
        None => summary["measurements"] = json!(traj.measurements.column_iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()),
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn scenario(common: &Common, mode: Option<Mode>) -> Result<bool, Error> {
    let cfg = load(common, mode)?;
    let record = run_scenario(&cfg)?;
    let body = match (&record.kalman, cfg.mode) {
        (Some(k), Mode::Kalman) => serde_json::to_value(k)?,
        _ => {
            // Per-iteration curves live in the output files; keep stdout short.
            let mut v = serde_json::to_value(&record)?;
            for agg in v["aggregates"].as_array_mut().into_iter().flatten() {
                if let Some(obj) = agg.as_object_mut() {
                    obj.remove("normalized_error");
                    obj.remove("cost");
                }
            }
            v
        }
    };
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(record.success())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate { common, window, burn_in } => simulate(common, *window, *burn_in),
        Command::Kalman(c) => scenario(c, Some(Mode::Kalman)),
        Command::Gd(c) => scenario(c, Some(Mode::Gd)),
        Command::Gf(c) => scenario(c, Some(Mode::Gf)),
        Command::Sgd(c) => scenario(c, Some(Mode::Sgd)),
        Command::GradCheck(c) => scenario(c, Some(Mode::GradCheck)),
        Command::CheckDuality(c) => scenario(c, Some(Mode::CheckDuality)),
        Command::Sweep(c) => scenario(c, None),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a run or check did not succeed; see the output record");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
