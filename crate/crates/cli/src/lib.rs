//! Command-line front end: `train`, `eval`, `ablate`, `plot`, `gradcheck`.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 runtime or
//! numeric error.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod plot;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<hfcr::Error> for CliError {
    fn from(e: hfcr::Error) -> Self {
        match e {
            hfcr::Error::Config(_) | hfcr::Error::NotImplemented(_) => Self::config(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "hfcr", about = "Few-shot fine-grained classification by hybrid feature fusion and reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model episodically and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on novel-class episodes.
    Eval(EvalArgs),
    /// Train and evaluate the variants of an ablation axis.
    Ablate(AblateArgs),
    /// Render training logs and reports as SVG plots plus text tables.
    Plot(PlotArgs),
    /// Finite-difference check of every trainable parameter of the pipeline.
    Gradcheck(GradcheckArgs),
}

/// Options shared by commands that build a run config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable), e.g. `--set train.lr0=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// `synthetic` or a path to an image-folder dataset.
    #[arg(long)]
    pub data: Option<String>,
    /// Episode way for training and evaluation.
    #[arg(long)]
    pub way: Option<usize>,
    /// Episode shot for training and evaluation.
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long, value_name = "on|off")]
    pub hffp: Option<String>,
    #[arg(long, value_name = "on|off")]
    pub hfrp: Option<String>,
    #[arg(long, value_name = "on|off")]
    pub channel: Option<String>,
    #[arg(long, value_name = "on|off")]
    pub spatial: Option<String>,
    /// `parallel`, `cfo_then_sfo` or `sfo_then_cfo`.
    #[arg(long)]
    pub arrangement: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (relative paths resolve under $HFCR_OUTPUT_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory containing `checkpoint.ckpt`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// Seed of the evaluation episodes.
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `components`, `features`, `arrangement` or `all`.
    #[arg(long)]
    pub axis: String,
    /// Training epochs per variant.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Evaluation episodes per variant.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Training logs (`train_log.csv`), ablation or evaluation reports.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
        Command::Plot(a) => commands::plot(&a).map(|_| ()),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
