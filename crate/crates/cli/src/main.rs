//! `lowshot` — command-line surface over the low-shot relation-matching
//! laboratory: forge pseudo-labeled pre-training data, pre-train and
//! meta-train the tiny encoder, evaluate few-shot and zero-shot episode
//! suites, and run the built-in invariant checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_override, RunConfig};

/// Failure classes, each with its own exit code so scripts can tell a typo
/// (usage, 2) from a bad setting (config, 3) from a genuine failure
/// (runtime, 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(err) => write!(f, "error: {err:#}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lowshot",
    version,
    about = "Desk-scale low-shot relation extraction by multi-choice prompt matching"
)]
struct Cli {
    /// Cap the worker threads used for parallel episode evaluation
    /// (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file; omit to run on the built-in defaults.
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set episodes.N=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw sentences into a batched pseudo-labeled paraphrase corpus.
    ForgeData(RunArgs),
    /// Pre-train the encoder on paraphrase-vs-predicate matching.
    Pretrain(RunArgs),
    /// Meta-train the encoder on sampled labeled episodes.
    MetaTrain(RunArgs),
    /// Run a few-shot episode suite with online adaptation.
    Eval(RunArgs),
    /// Run a zero-shot suite: no support instances, no adaptation.
    ZeroShotEval(RunArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    match cli.command {
        Command::ForgeData(args) => commands::forge_data(&args.resolve()?),
        Command::Pretrain(args) => commands::run_pretrain(&args.resolve()?),
        Command::MetaTrain(args) => commands::run_meta_train(&args.resolve()?),
        Command::Eval(args) => commands::run_eval(&args.resolve()?, false),
        Command::ZeroShotEval(args) => commands::run_eval(&args.resolve()?, true),
        Command::Selftest => commands::run_selftest(),
    }
}

fn main() -> ExitCode {
    // clap itself exits with 2 on unparseable command lines, matching the
    // usage-error code used below.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
