//! `rdunet`: data generation, training, prediction, evaluation and
//! verification from the command line.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "rdunet",
    version,
    about = "Residual log-dense U-Net for sea/land segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `training.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces the `seed` of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: PGM image/mask pairs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Square image size; defaults to the configured network height.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on the train split of a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding `manifest.tsv`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write argmax masks for a dataset split or individual images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "input")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Image PGM files (repeatable).
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predicted masks against the ground truth of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory with masks laid out like the dataset's.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every layer and of the configured dense block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Elements probed per tensor; 0 probes all.
        #[arg(long, default_value_t = 24)]
        max_probes: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Edge count and maximum backpropagation distance of skip schemes.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// full-dense, log-dense, chain or residual-chain (repeatable).
        #[arg(long, default_value = "log-dense")]
        scheme: Vec<String>,
        /// Layer count `n` or inclusive range `a..b`.
        #[arg(long = "L", value_name = "N|A..B", default_value = "6")]
        layers: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const VERIFICATION: u8 = 5;

    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: Self::CONFIG,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError {
            code: Self::IO,
            message: msg.into(),
        }
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        CliError {
            code: Self::VERIFICATION,
            message: msg.into(),
        }
    }
}

impl From<rdunet::Error> for CliError {
    fn from(e: rdunet::Error) -> Self {
        use rdunet::Error as E;
        let code = match e {
            E::Io(_) | E::Parse { .. } | E::Checkpoint(_) => Self::IO,
            E::NonFinite(_) => Self::NUMERIC,
            _ => Self::CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    rdunet::parallel::init_from_env();
    match cli.command {
        Command::GenData {
            common,
            count,
            size,
            out_dir,
        } => commands::gen_data(&common, count, size, &out_dir),
        Command::Train { common, data, out_dir } => commands::train(&common, &data, &out_dir),
        Command::Predict {
            common,
            checkpoint,
            data,
            split,
            input,
            out_dir,
        } => commands::predict(&common, &checkpoint, data.as_deref(), &split, &input, &out_dir),
        Command::Eval {
            common,
            data,
            split,
            predictions,
            out_dir,
        } => commands::eval(&common, &data, &split, &predictions, &out_dir),
        Command::Gradcheck {
            common,
            tolerance,
            step,
            max_probes,
            out_dir,
        } => commands::gradcheck(&common, tolerance, step, max_probes, out_dir.as_deref()),
        Command::Analyze {
            common,
            scheme,
            layers,
            out_dir,
        } => commands::analyze(&common, &scheme, &layers, out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
