//! `flowcast`: scenario sweeps, training, prediction and baselines.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunArgs;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(flowcast_core::Error),
    /// Training ran but did not produce a usable model.
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use flowcast_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Training(_) | CliError::Core(E::Training(_) | E::Numerical { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Training(m) => write!(f, "training failed: {m}"),
        }
    }
}

impl From<flowcast_core::Error> for CliError {
    fn from(e: flowcast_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowcast", version, about = "Traffic-flow forecasting with adaptive graph attention and conformal intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and check a dataset, then print a summary.
    Validate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build the adaptive adjacency for each CV level.
    Adjacency {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and calibrate one model (first CV level) into `--out`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dump_adjacency: bool,
    },
    /// Forecast with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `calibration.json` next to the checkpoint.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Miscoverage level; defaults to the calibrated one.
        #[arg(long)]
        alpha: Option<f64>,
        /// First forecast timestamp; defaults to the step after the data.
        #[arg(long)]
        at: Option<String>,
        /// Output CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score HA, SAF and LTM on the test split.
    Baselines {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        denormalized: bool,
    },
    /// Full sweep: adjacency, training, calibration and evaluation per CV.
    RunScenarios {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dump_adjacency: bool,
        /// Also report metrics in vehicle units.
        #[arg(long)]
        denormalized: bool,
    },
    /// Print a metrics JSON file as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic ring-network dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        stations: usize,
        #[arg(long, default_value_t = 21)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWCAST_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { run } => commands::validate(&run),
        Command::Adjacency { run } => commands::adjacency(&run),
        Command::Train { run, dump_adjacency } => commands::train(&run, dump_adjacency),
        Command::Predict {
            checkpoint,
            data,
            calibration,
            alpha,
            at,
            out,
        } => commands::predict(&commands::PredictArgs {
            checkpoint,
            data,
            calibration,
            alpha,
            at,
            out,
        }),
        Command::Baselines { run, denormalized } => commands::baselines(&run, denormalized),
        Command::RunScenarios {
            run,
            dump_adjacency,
            denormalized,
        } => commands::run_scenarios(&run, dump_adjacency, denormalized),
        Command::Report { input } => commands::report(&input),
        Command::Synth { out, stations, days, seed } => commands::synth(&out, stations, days, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
