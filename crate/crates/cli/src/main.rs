//! `tpp`: simulate, fit, evaluate, predict and report.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors
//! (bad flags, bad config files, unknown model kinds).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    tpp_core::events::EventsError,
    tpp_core::simulate::SimulateError,
    tpp_core::train::TrainError,
    tpp_core::eval::EvalError
);

#[derive(Debug, Parser)]
#[command(
    name = "tpp",
    version,
    about = "Recurrent point process models with neural cumulative hazards"
)]
struct Cli {
    /// Log progress (per-epoch losses, timings) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw event sequences from a synthetic process.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// s_poisson, n_poisson, s_renewal, n_renewal, self_correcting,
        /// hawkes1, hawkes2, or hawkes with --mu/--alpha/--beta.
        #[arg(long)]
        process: Option<String>,
        /// Events per sequence.
        #[arg(long)]
        n: Option<usize>,
        /// Number of independent sequences.
        #[arg(long)]
        sequences: Option<usize>,
        /// Output format: plain (one file per sequence) or jsonl.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
    },
    /// Fit a model by maximum likelihood and write a checkpoint.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Event file (plain or .jsonl); its first train_frac of events is used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// constant, exponential, piecewise or chfn.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        train_frac: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Truncation depths to select from, e.g. 5,10,20,40.
        #[arg(long, value_delimiter = ',')]
        depth_grid: Option<Vec<usize>>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        clip_norm: Option<f64>,
    },
    /// Score checkpoints on the test part of a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// One or more checkpoint files.
        #[arg(long, num_args = 1..)]
        checkpoint: Option<Vec<PathBuf>>,
        #[arg(long)]
        train_frac: Option<f64>,
        /// Generating process for standardized scores: a preset name or a
        /// manifest.json written by `simulate`.
        #[arg(long)]
        true_spec: Option<String>,
    },
    /// Median next-event predictions for the test part of a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train_frac: Option<f64>,
    },
    /// Combine JSON reports from `evaluate` into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        reports: Option<Vec<PathBuf>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            common,
            process,
            n,
            sequences,
            format,
            mu,
            alpha,
            beta,
        } => commands::simulate(
            &common,
            commands::SimulateFlags {
                process,
                n,
                sequences,
                format,
                mu,
                alpha,
                beta,
            },
        ),
        Command::Fit {
            common,
            data,
            model,
            train_frac,
            learning_rate,
            batch_size,
            depth_grid,
            validation_fraction,
            max_epochs,
            patience,
            clip_norm,
        } => commands::fit(
            &common,
            commands::FitFlags {
                data,
                model,
                train_frac,
                learning_rate,
                batch_size,
                depth_grid,
                validation_fraction,
                max_epochs,
                patience,
                clip_norm,
            },
        ),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            train_frac,
            true_spec,
        } => commands::evaluate(&common, data, checkpoint, train_frac, true_spec),
        Command::Predict {
            common,
            data,
            checkpoint,
            train_frac,
        } => commands::predict(&common, data, checkpoint, train_frac),
        Command::Report { common, reports } => commands::report(&common, reports),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
