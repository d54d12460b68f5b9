//! `metaqda`: meta-train NIW priors on feature files and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use metaqda_core::trainer::{Optimizer, Schedule};
use metaqda_core::{LossKind, Mode};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(metaqda_core::Error),
    /// Stdout was closed by the reader, as with `metaqda eval ... | head`.
    BrokenPipe,
}

impl From<metaqda_core::Error> for CliError {
    fn from(e: metaqda_core::Error) -> Self {
        match e {
            metaqda_core::Error::InvalidConfig(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Data(e) => e.fmt(f),
            CliError::BrokenPipe => f.write_str("broken pipe"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "metaqda", version, about = "Bayesian QDA with a meta-learned NIW prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-learn a prior from episodes of a feature file.
    MetaTrain(MetaTrainArgs),
    /// Episodic few-shot accuracy with a 95% interval.
    Eval(EvalArgs),
    /// Few-shot class-incremental sessions.
    EvalIncremental(IncrementalArgs),
    /// Expected calibration error before and after temperature scaling.
    Calibrate(CalibrateArgs),
    /// Write a synthetic feature file whose classes come from a known prior.
    Synth(SynthArgs),
    /// Validate and summarize a feature file or checkpoint.
    Inspect(InspectArgs),
}

/// Episode shape shared by the episodic commands.
#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
}

#[derive(Debug, Args)]
pub struct MetaTrainArgs {
    /// Training features (MQDF).
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Predictive used inside the loss: map or fb.
    #[arg(long, default_value = "fb")]
    pub mode: Mode,
    /// generative or discriminative.
    #[arg(long, default_value = "generative")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// adam, sgd or momentum.
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    /// constant or cosine.
    #[arg(long, default_value = "constant")]
    pub schedule: Schedule,
    /// Episodes averaged per update.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Keep the prior mean at its initial value.
    #[arg(long)]
    pub freeze_mean: bool,
    /// Feature preprocessing: none or cl2n (center by the training mean, then unit L2 norm).
    #[arg(long, default_value = "none")]
    pub normalize: String,
    /// Start from this checkpoint instead of the standard prior.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    /// Prior checkpoint; required unless `--estimator mle`.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// metaqda (Bayesian QDA with the prior) or mle (ridge-regularized maximum likelihood QDA).
    #[arg(long, default_value = "metaqda")]
    pub estimator: String,
    /// Override the checkpoint's mode: map, fb or lda.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Diagonal loading for `--estimator mle`: `auto` or a number.
    #[arg(long, default_value = "auto")]
    pub ridge: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also print per-episode accuracies.
    #[arg(long)]
    pub per_episode: bool,
}

#[derive(Debug, Args)]
pub struct IncrementalArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Classes `0..base-classes` form session 0.
    #[arg(long, default_value_t = 60)]
    pub base_classes: usize,
    /// New classes per session.
    #[arg(long, default_value_t = 5)]
    pub session_ways: usize,
    /// Support samples per base class.
    #[arg(long, default_value_t = 5)]
    pub base_shots: usize,
    /// Support samples per novel class.
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Features the reported ECE is measured on.
    #[arg(long)]
    pub features: PathBuf,
    /// Features the temperature is fitted on; defaults to `--features`.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value_t = 200)]
    pub val_episodes: usize,
    /// Equal-width confidence bins.
    #[arg(long, default_value_t = metaqda_core::calibration::DEFAULT_BINS)]
    pub bins: usize,
    /// Use this temperature instead of fitting one.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Print the per-bin reliability table.
    #[arg(long)]
    pub table: bool,
    /// Test episodes use this seed, validation episodes `seed + 1`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 40)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Override the ground-truth κ*.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Override the ground-truth ν* (default d + 6).
    #[arg(long)]
    pub nu: Option<f64>,
    /// Standard deviation of isotropic noise added to every class.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// An MQDF feature file or a prior checkpoint.
    pub path: PathBuf,
}

fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect(), &command()) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) | Err(CliError::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) | CliError::BrokenPipe => 2,
            })
        }
    }
}
