//! `rvae`: corrupt → train → score → repair → evaluate, driven by files.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rvae::Error;

#[derive(Parser)]
#[command(name = "rvae", version, about = "Cell-level outlier detection and repair for mixed-type tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inject seeded cell noise and write the dirty table plus ground truth.
    Corrupt(CorruptArgs),
    /// Train a model (vae, rvae-cvi, rvae-avi) or fit the marginal baseline.
    Train(TrainArgs),
    /// Write cell and row outlier scores.
    Score(ScoreArgs),
    /// Write a repaired table and the categorical simplexes.
    Repair(RepairArgs),
    /// Compare scores and/or repairs against a corruption record.
    Evaluate(EvaluateArgs),
    /// Sweep corruption levels and models, writing one aggregate CSV.
    Experiment(ExperimentArgs),
    /// Generate the synthetic mixed-type demo table.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Fraction of rows to corrupt, in (0, 1].
    #[arg(long)]
    pub rows: f64,
    /// Fraction of features corrupted in each selected row.
    #[arg(long, default_value_t = 0.2)]
    pub features: f64,
    /// e.g. `gauss:5,cat:0`, `laplace:4`, `lognorm:1`, `gmix:0,1,0.5,5,2,0.5,cat:0.5`.
    #[arg(long)]
    pub noise: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dirty: PathBuf,
    #[arg(long)]
    pub out_record: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
pub struct ModelArgs {
    /// vae | rvae-cvi | rvae-avi | marginal
    #[arg(long, default_value = "rvae-cvi")]
    pub model: String,
    /// Prior probability that a cell is clean.
    #[arg(long, default_value_t = 0.95)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 150)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub latent: usize,
    #[arg(long, default_value_t = 400)]
    pub hidden: usize,
    #[arg(long, default_value_t = 50)]
    pub embedding: usize,
    /// Standard deviation of the real-valued outlier component.
    #[arg(long = "s", default_value_t = 2.0)]
    pub outlier_scale: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log CSV (default: `<out>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Serialize)]
pub struct ScoreArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// nll | pi (default: pi for robust models, nll otherwise)
    #[arg(long)]
    pub rule: Option<String>,
    /// Posterior samples averaged per row.
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct RepairArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// map | one-stage | two-stage (marginal checkpoints always use their own rule)
    #[arg(long, default_value = "map")]
    pub method: String,
    #[arg(long, default_value_t = 5)]
    pub gibbs_iters: usize,
    /// MAP: decode a posterior sample instead of the posterior mean.
    #[arg(long)]
    pub sample_latent: bool,
    /// Marginal checkpoints: repair only the cells listed in this record.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Categorical simplexes (default: `<out>.simplex.csv`).
    #[arg(long)]
    pub out_simplex: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// The dirty table; its statistics define the standardized units.
    #[arg(long)]
    pub dirty: PathBuf,
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub repaired: Option<PathBuf>,
    /// Simplex file of the repair (default: `<repaired>.simplex.csv`).
    #[arg(long)]
    pub simplex: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional flattened CSV of the report.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ExperimentArgs {
    /// Clean table.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value = "gauss:5,cat:0")]
    pub noise: String,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2,0.5")]
    pub rows: Vec<f64>,
    #[arg(long, default_value_t = 0.2)]
    pub features: f64,
    #[arg(long, value_delimiter = ',', default_value = "rvae-cvi,vae,marginal")]
    pub models: Vec<String>,
    /// Seeds 0..N per row fraction.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[command(flatten)]
    pub train: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_schema: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Training(String),
    SchemaMismatch(String),
    PiRule(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Training(_) => 4,
            CliError::SchemaMismatch(_) => 5,
            CliError::PiRule(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Training(m) | CliError::SchemaMismatch(m) | CliError::PiRule(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::InvalidConfig(_) | Error::InvalidSchema(_) | Error::Corruption(_) | Error::Metric(_) => CliError::Config(m),
            Error::Training { .. } | Error::NonFinite(_) => CliError::Training(m),
            Error::SchemaMismatch(_) | Error::Dimension { .. } => CliError::SchemaMismatch(m),
            Error::PiRuleUnavailable(_) => CliError::PiRule(m),
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Cell { .. } | Error::Data(_) | Error::Checkpoint(_) => {
                CliError::Io(m)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corrupt(a) => commands::corrupt(&a),
        Command::Train(a) => commands::train(&a),
        Command::Score(a) => commands::score(&a),
        Command::Repair(a) => commands::repair(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
