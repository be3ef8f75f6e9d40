mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irwgan::Error;

/// Unaligned image-to-image translation with learned importance weights.
#[derive(Debug, Parser)]
#[command(name = "irwgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a finished run: FID/KID in both directions plus weight reports.
    Eval(EvalArgs),
    /// One run per λ_ESS value with a shared seed, summarized in sweep.csv.
    SweepEss(SweepArgs),
    /// Train with uniform weights and record per-epoch subset errors.
    Diagnose(DiagnoseArgs),
    /// Apply a trained generator to a directory of PNGs.
    Translate(TranslateArgs),
}

/// Hyperparameter sources, lowest precedence first:
/// built-in base, `--config`, `--set`, `IRW_SEED`, `--seed`.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set lambda_ess=0` or `--set generator.ngf=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where the two domains come from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// `default` or a JSON synthetic-pair spec.
    #[arg(long, conflicts_with_all = ["x", "y"])]
    pub synth: Option<String>,
    /// Directory of X-domain PNGs.
    #[arg(long, requires = "y")]
    pub x: Option<PathBuf>,
    /// Directory of Y-domain PNGs.
    #[arg(long, requires = "x")]
    pub y: Option<PathBuf>,
    /// Labels for X; defaults to `<x>/labels.csv` when present.
    #[arg(long)]
    pub x_labels: Option<PathBuf>,
    #[arg(long)]
    pub y_labels: Option<PathBuf>,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Test X images; without it the run's own synthetic pair is used.
    #[arg(long, requires = "test_y")]
    pub test_x: Option<PathBuf>,
    #[arg(long, requires = "test_x")]
    pub test_y: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated λ_ESS values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    X2y,
    Y2x,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub direction: Direction,
    #[arg(long)]
    pub out: PathBuf,
}

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: 5, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ConfigKey(_)
            | Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MissingLabels(_)
            | Error::Shape(_)
            | Error::Length { .. } => 2,
            Error::Divergence { .. } | Error::StepDiverged { .. } | Error::NonFinite(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::Io { .. }
            | Error::Json(_)
            | Error::Decode { .. }
            | Error::NoSamples(_)
            | Error::LabelsFile { .. }
            | Error::LabelCountMismatch { .. } => 5,
            Error::RecordConsumed | Error::NotPsd(_) => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SweepEss(a) => commands::sweep_ess(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Translate(a) => commands::translate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
