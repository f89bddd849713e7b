//! Command-line front end: simulate, fit, enumerate, montecarlo, trajectories, kappa.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tvcgmm::model::{FormKind, TvcDecomposition};

/// Exit status of a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    FitFailed,
    PartialMonteCarlo,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::FitFailed => 2,
            Status::PartialMonteCarlo => 3,
        }
    }
}

const VALIDATION_ERROR: u8 = 1;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tvcgmm", version, about = "Growth mixture models with a decomposed time-varying covariate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Generate a dataset from a condition file.
    Simulate(SimulateArgs),
    /// Fit a growth mixture model to a dataset.
    Fit(FitArgs),
    /// Fit outcome-only models with 1..=K classes and select by BIC.
    Enumerate(EnumerateArgs),
    /// Run a Monte Carlo study for one condition.
    Montecarlo(MonteCarloArgs),
    /// Class-specific mean curves implied by a fitted model.
    Trajectories(TrajectoryArgs),
    /// Latent kappa agreement between two fitted solutions.
    Kappa(KappaArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset CSV (wide format unless --long).
    #[arg(long)]
    pub data: PathBuf,
    /// Read the long format `id,wave,t,y,x,xe,xg1,xg2[,label]`.
    #[arg(long)]
    pub long: bool,
    /// Standardise the TVC at every wave by the baseline mean and sd.
    #[arg(long)]
    pub standardize_tvc: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizerArgs {
    /// Maximum number of start attempts.
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Condition file (TOML).
    #[arg(long)]
    pub condition: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value = "bilinear", value_parser = parse_form)]
    pub form: FormKind,
    #[arg(long, default_value = "slopes", value_parser = parse_decomposition)]
    pub decomposition: TvcDecomposition,
    /// Drop the covariates and fit the outcome-only model.
    #[arg(long)]
    pub unconditional: bool,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnumerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest number of classes to fit.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value = "bilinear", value_parser = parse_form)]
    pub form: FormKind,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MonteCarloArgs {
    #[arg(long)]
    pub condition: PathBuf,
    /// Classes of the fitted model (defaults to the generating count).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Fitted form (defaults to the generating form).
    #[arg(long, value_parser = parse_form)]
    pub form: Option<FormKind>,
    /// Fitted decomposition (defaults to the generating one).
    #[arg(long, value_parser = parse_decomposition)]
    pub decomposition: Option<TvcDecomposition>,
    /// Converged replications wanted.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrajectoryArgs {
    /// Results file written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub from: f64,
    /// End of the grid (defaults to J - 1).
    #[arg(long)]
    pub to: Option<f64>,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KappaArgs {
    /// First results file written by `fit`.
    #[arg(long)]
    pub first: PathBuf,
    /// Second results file written by `fit`.
    #[arg(long)]
    pub second: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_form(s: &str) -> Result<FormKind, String> {
    s.parse().map_err(|e: tvcgmm::Error| e.to_string())
}

fn parse_decomposition(s: &str) -> Result<TvcDecomposition, String> {
    s.parse().map_err(|e: tvcgmm::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(VALIDATION_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let config = serde_json::to_value(&cli.command).expect("arguments serialise");
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &config),
        Command::Fit(a) => commands::fit(a, &config),
        Command::Enumerate(a) => commands::enumerate(a, &config),
        Command::Montecarlo(a) => commands::montecarlo(a, &config),
        Command::Trajectories(a) => commands::trajectories(a, &config),
        Command::Kappa(a) => commands::kappa(a, &config),
    };
    match result {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(VALIDATION_ERROR)
        }
    }
}
