//! Pipeline orchestration behind the `rd-binn` command.

pub mod config;
pub mod fsio;
pub mod pipeline;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use pipeline::Context;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or refused overwrite (exit 2).
    Config(String),
    /// A required input from an earlier stage is absent (exit 2).
    Missing(String),
    Core(rd_binn_core::Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rd_binn_core::Error> for CliError {
    fn from(e: rd_binn_core::Error) -> Self {
        match e {
            rd_binn_core::Error::Io(io) => CliError::Io(io),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rd-binn", version, about = "Learn reaction-diffusion models from cell density data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override a config entry, e.g. `--set train.es_patience=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from known rates.
    Synth,
    /// Bin the input into a density tensor.
    Preprocess,
    /// Train every split for every patience in the sweep.
    Train,
    /// Build ensemble curves and distil them into expressions.
    EnsembleSr,
    /// Compare total cell counts from data, networks and expressions.
    Evaluate,
    /// All stages in order.
    RunAll,
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let ctx = Context::new(config, cli.out.clone(), jobs, cli.force)?;
    match cli.command {
        Command::Synth => pipeline::cmd_synth(&ctx).map(drop),
        Command::Preprocess => pipeline::cmd_preprocess(&ctx).map(drop),
        Command::Train => pipeline::cmd_train(&ctx).map(drop),
        Command::EnsembleSr => pipeline::cmd_ensemble_sr(&ctx).map(drop),
        Command::Evaluate => pipeline::cmd_evaluate(&ctx).map(drop),
        Command::RunAll => pipeline::cmd_run_all(&ctx).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let numeric = rd_binn_core::Error::Instability {
            step: 1,
            time: 0.0,
            max_d: 1.0,
            reason: "x".into(),
        };
        assert_eq!(CliError::from(numeric).exit_code(), 3);
        let parse = rd_binn_core::Error::Parse {
            position: 4,
            message: "x".into(),
        };
        assert_eq!(CliError::from(parse).exit_code(), 2);
    }

    #[test]
    fn global_flags_parse_after_the_command() {
        let cli = Cli::try_parse_from(["rd-binn", "train", "--out", "x", "--jobs", "2", "--set", "a=1", "--set", "b=2", "--force"]).unwrap();
        assert_eq!(cli.command, Command::Train);
        assert_eq!(cli.jobs, Some(2));
        assert_eq!(cli.set, ["a=1", "b=2"]);
        assert!(cli.force);
        assert!(Cli::try_parse_from(["rd-binn", "bogus"]).is_err());
    }
}
