//! `trafficsim`: ingest recordings, estimate signals, train and run policies,
//! and score simulated logs against recorded ones.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Failures print one JSON object on stderr.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use trafficsim::config::RunConfig;
use trafficsim::Exec;

#[derive(Debug, Parser)]
#[command(name = "trafficsim", version, about = "Closed-loop urban traffic simulation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Missing keys take the defaults listed below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's top-level `seed` (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable;
    /// applied after the config file, before the dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run on a single thread (results are identical either way).
    #[arg(long)]
    pub sequential: bool,
}

impl Common {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    /// Learned attention policy (needs --checkpoint).
    Egat,
    /// IDM car following on recorded routes.
    Idm,
    /// Constant-velocity extrapolation through the tracking controller.
    ConstantVelocity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TopologyArg {
    Grid,
    Ring,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse wide-row drone recordings into normalized trajectory CSVs and
    /// split them by recording day (last day held out).
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Recording file tagged with its day number. Repeatable.
        #[arg(long = "recording", value_name = "DAY=PATH", required = true)]
        recordings: Vec<String>,
        /// Projection origin; defaults to the centroid of all samples.
        #[arg(long, value_name = "LAT,LON")]
        origin: Option<String>,
    },
    /// Estimate a signal schedule for every signalized road from vehicle
    /// motion.
    EstimateLights {
        #[command(flatten)]
        common: Common,
        /// Normalized trajectory CSV.
        #[arg(long, value_name = "CSV")]
        trajectories: PathBuf,
        /// Road network file.
        #[arg(long, value_name = "JSON")]
        network: PathBuf,
        /// Fit a fixed two-phase cycle per road [default: lights.fit_cycle].
        #[arg(long)]
        fit_cycle: bool,
    },
    /// Train the attention policy on normalized trajectories.
    Train {
        #[command(flatten)]
        common: Common,
        /// Road network file.
        #[arg(long, value_name = "JSON")]
        network: PathBuf,
        /// Training recording. Repeatable.
        #[arg(long = "train", value_name = "CSV", required = true)]
        train: Vec<PathBuf>,
        /// Validation recording. Repeatable; defaults to the training set.
        #[arg(long = "val", value_name = "CSV")]
        val: Vec<PathBuf>,
        /// Signal schedule shared by all recordings.
        #[arg(long, value_name = "JSON")]
        signals: Option<PathBuf>,
        /// Epoch budget [default: train.epochs].
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "EGAT")]
        resume: Option<PathBuf>,
    },
    /// Fit IDM parameters to leader-follower pairs in recorded trajectories.
    CalibrateIdm {
        #[command(flatten)]
        common: Common,
        /// Road network file.
        #[arg(long, value_name = "JSON")]
        network: PathBuf,
        /// Recording. Repeatable.
        #[arg(long = "trajectories", value_name = "CSV", required = true)]
        trajectories: Vec<PathBuf>,
    },
    /// Closed-loop rollout that replays each recorded agent's entry.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        /// Road network file.
        #[arg(long, value_name = "JSON")]
        network: PathBuf,
        /// Recording supplying entry times, routes and initial states.
        #[arg(long, value_name = "CSV")]
        trajectories: PathBuf,
        /// Signal schedule; without one every light is unknown.
        #[arg(long, value_name = "JSON")]
        signals: Option<PathBuf>,
        /// Model for `--policy egat`.
        #[arg(long, value_name = "EGAT")]
        checkpoint: Option<PathBuf>,
        /// IDM parameters (calibrate-idm output or a bare parameter
        /// object) for `--policy idm` [default: config `idm` section].
        #[arg(long, value_name = "JSON")]
        idm: Option<PathBuf>,
        /// Steps to simulate [default: simulate.steps].
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a simulated log with the recorded one.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Recorded log (normalized CSV).
        #[arg(long, value_name = "CSV")]
        real: PathBuf,
        /// Simulated log, same schema.
        #[arg(long, value_name = "CSV")]
        sim: PathBuf,
        /// Road network file.
        #[arg(long, value_name = "JSON")]
        network: PathBuf,
    },
    /// Generate a synthetic signalized network with IDM traffic.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        /// Network shape [default: synth.topology].
        #[arg(long, value_enum)]
        topology: Option<TopologyArg>,
        /// Arrivals per second per entry road [default: synth.demand].
        #[arg(long)]
        demand: Option<f64>,
        /// Recorded duration after warm-up, seconds [default: synth.duration].
        #[arg(long)]
        duration: Option<f64>,
    },
}

/// Config sections each subcommand reads, shown under `--help`.
const SECTIONS: [(&str, &[&str]); 7] = [
    ("ingest", &["resample"]),
    ("estimate-lights", &["lights"]),
    ("train", &["graph", "train"]),
    ("calibrate-idm", &["idm", "calibration", "tuples", "rule"]),
    ("simulate", &["sim", "simulate", "graph", "rule", "idm"]),
    ("evaluate", &["metrics"]),
    ("make-synthetic", &["synth", "rule"]),
];

fn defaults_help(sections: &[&str]) -> String {
    let text = RunConfig::default().to_toml_string().expect("default config serializes");
    let table: toml::Table = text.parse().expect("default config parses");
    let mut out = String::from("Config defaults (override with --config or --set):\n");
    let top: toml::Table = table
        .iter()
        .filter(|(_, v)| !v.is_table())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    out += &toml::to_string(&top).expect("scalar table");
    for s in sections {
        let mut one = toml::Table::new();
        one.insert(s.to_string(), table[*s].clone());
        out += "\n";
        out += &toml::to_string(&one).expect("section table");
    }
    out
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in SECTIONS {
        let help = defaults_help(sections);
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help));
    }
    cmd
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return commands::Failure::Usage(e.render().to_string()).report();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return commands::Failure::Usage(e.to_string()).report(),
    };
    let result = match cli.command {
        Command::Ingest {
            common,
            recordings,
            origin,
        } => commands::ingest(&common, &recordings, origin.as_deref()),
        Command::EstimateLights {
            common,
            trajectories,
            network,
            fit_cycle,
        } => commands::estimate_lights(&common, &trajectories, &network, fit_cycle),
        Command::Train {
            common,
            network,
            train,
            val,
            signals,
            epochs,
            resume,
        } => commands::train(&common, &network, &train, &val, signals.as_deref(), epochs, resume.as_deref()),
        Command::CalibrateIdm {
            common,
            network,
            trajectories,
        } => commands::calibrate_idm(&common, &network, &trajectories),
        Command::Simulate {
            common,
            policy,
            network,
            trajectories,
            signals,
            checkpoint,
            idm,
            steps,
        } => commands::simulate(
            &common,
            commands::SimulateArgs {
                policy,
                network: &network,
                trajectories: &trajectories,
                signals: signals.as_deref(),
                checkpoint: checkpoint.as_deref(),
                idm: idm.as_deref(),
                steps,
            },
        ),
        Command::Evaluate {
            common,
            real,
            sim,
            network,
        } => commands::evaluate(&common, &real, &sim, &network),
        Command::MakeSynthetic {
            common,
            topology,
            demand,
            duration,
        } => commands::make_synthetic(&common, topology, demand, duration),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
