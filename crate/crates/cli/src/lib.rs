//! The `hmc-tune` experiment driver.
//!
//! Each subcommand reads a flat `key = value` configuration, writes
//! `resolved_config.txt` plus its CSV artifacts into the output directory and
//! maps failures onto stable exit codes (see [`CliError::exit_code`]).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

pub use commands::Experiment;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Library(#[from] hmc_tune::Error),

    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    /// 0 success, 1 internal error, 2 configuration error, 3 statistical
    /// precondition failure.
    ///
    /// Library contract and domain errors can only be triggered through
    /// configuration values, so they count as configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Library(e) => library_exit_code(e),
            Self::Internal(_) => 1,
        }
    }
}

fn library_exit_code(e: &hmc_tune::Error) -> i32 {
    use hmc_tune::Error as E;
    match e {
        E::Contract(_) | E::Domain(_) | E::Unsupported(_) => 2,
        E::UnstableRegime { .. }
        | E::InsufficientSignal { .. }
        | E::DegenerateVariance
        | E::TargetSearchExhausted { .. } => 3,
        E::Chain { source, .. } => library_exit_code(source),
    }
}

#[derive(Debug, Parser)]
#[command(name = "hmc-tune", version, about = "Step-size tuning experiments for Hamiltonian Monte Carlo")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandLine,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// `key=value` overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum CommandLine {
    /// Mean Hamiltonian error of the 1-D Gaussian over a (step size, time) grid.
    DeltaScan(RunArgs),
    /// E[exp(Δ)] and low-order cumulants of the Hamiltonian error per step size.
    ConstraintCheck(RunArgs),
    /// Lower and upper cost bounds over acceptance levels, with their minimisers.
    Bounds(RunArgs),
    /// Empirical against predicted acceptance and cost on a product Gaussian.
    GaussExperiment(RunArgs),
    /// Divergences and R-hat of the funnel latent across acceptance targets.
    FunnelScan(RunArgs),
    /// Run adapted HMC chains and write draws and transition records.
    Sample(RunArgs),
    /// Log-log scaling slopes of error moments against the step size.
    Scaling(RunArgs),
}

impl CommandLine {
    pub fn into_parts(self) -> (Experiment, RunArgs) {
        match self {
            Self::DeltaScan(a) => (Experiment::DeltaScan, a),
            Self::ConstraintCheck(a) => (Experiment::ConstraintCheck, a),
            Self::Bounds(a) => (Experiment::Bounds, a),
            Self::GaussExperiment(a) => (Experiment::GaussExperiment, a),
            Self::FunnelScan(a) => (Experiment::FunnelScan, a),
            Self::Sample(a) => (Experiment::Sample, a),
            Self::Scaling(a) => (Experiment::Scaling, a),
        }
    }
}

/// Resolves the configuration and runs one subcommand. Warnings about
/// ignored keys go to stderr.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let (experiment, args) = cli.command.into_parts();
    let entries = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            config::parse_entries(&text)?
        }
        None => Vec::new(),
    };
    let (mut cfg, warnings) = config::RunConfig::resolve(
        experiment.name(),
        &experiment.keys(),
        &Experiment::all_known_keys(),
        &entries,
        args.seed,
        &args.overrides,
    )?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let out = output::Output::create(&args.out)?;
    experiment.run(&mut cfg, &out)
}
