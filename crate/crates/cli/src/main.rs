mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Method, Target};

#[derive(Parser)]
#[command(name = "confscale", version, about = "Configuration-aware loss prediction for pretraining runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Jsonl,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Pipeline config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random step (synthesis, split, training).
    #[arg(long)]
    seed: Option<u64>,
    /// Record format for run and prediction files.
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Print the canonical field table.
    Schema {
        /// Also write `schema.tsv` here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate synthetic run logs from the oracle in the config.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: PathBuf,
    },
    /// Parse, smooth and filter a run log.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Raw run log.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Split an ingested dataset into train / ID validation / OOD validation.
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `ingest`.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Runs with N (millions) above this go to the OOD split.
        #[arg(long)]
        ood_threshold: Option<f64>,
        /// Fraction of in-distribution groups used for training.
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Fit scaling-law baselines on the training split.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a residual regressor on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long, value_enum)]
        target: Option<Target>,
    },
    /// Predict final losses for a file of configurations.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (regressor or GBT).
        #[arg(long)]
        model: PathBuf,
        /// One configuration per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Predict loss curves with a curve-trained regressor.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Evenly spaced completion fractions per curve.
        #[arg(long, default_value_t = 30)]
        points: usize,
    },
    /// Sweep the grid in the config and recommend a configuration at (N, D).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint to sweep.
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// Sweep a synthetic oracle instead of a model.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Model size, millions of parameters.
        #[arg(long)]
        n: f64,
        /// Data size, billions of tokens.
        #[arg(long)]
        d: f64,
        /// Fix a field, removing it from the grid (repeatable).
        #[arg(long = "fix", value_name = "FIELD=VALUE")]
        fix: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predictions file (`run_id` plus `predicted_loss`).
        #[arg(long, requires = "truth", conflicts_with_all = ["input", "model"])]
        pred: Option<PathBuf>,
        /// Ground-truth file (`run_id` plus `final_loss`).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Dataset directory with splits and baselines.
        #[arg(long, requires = "model")]
        input: Option<PathBuf>,
        /// Model checkpoints to score on each split (repeatable).
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn module(&self) -> &'static str {
        match self {
            Command::Schema { .. } => "config_model",
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } | Command::Split { .. } => "ingest",
            Command::Fit { .. } => "lawfit",
            Command::Train { method: Some(Method::Gbt), .. } => "gbt",
            Command::Train { .. } | Command::Predict { .. } | Command::Curve { .. } => "regressor",
            Command::Sweep { .. } => "select",
            Command::Eval { .. } => "eval",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let module = cli.command.module();
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{module}]: {e}");
            ExitCode::from(1)
        }
    }
}
