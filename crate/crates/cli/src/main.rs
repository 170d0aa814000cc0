//! `fpan`: generate data, train, sample, evaluate, and run noise-policy
//! studies from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{EvalArgs, FitCurveArgs, GenDataArgs, SampleArgs, SweepArgs, TrainArgs, VerifyStatsArgs};

#[derive(Debug, Parser)]
#[command(
    name = "fpan",
    version,
    about = "Token-embedding noise policies for conditional diffusion"
)]
struct Cli {
    /// JSON object of flag values for the subcommand; flags given on the
    /// command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic captioned dataset with duplicate groups.
    GenData(GenDataArgs),
    /// Train a denoiser under a noise policy.
    Train(TrainArgs),
    /// Generate images from a checkpoint using training-caption prompts.
    Sample(SampleArgs),
    /// Score generated images and write one metrics row.
    Eval(EvalArgs),
    /// Run a policy grid study with resumable results.
    Sweep(SweepArgs),
    /// Fit trade-off curves and stage labels to a results file.
    FitCurve(FitCurveArgs),
    /// Check closed-form embedding moments against Monte-Carlo draws.
    VerifyStats(VerifyStatsArgs),
}

/// How a command failed, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<fpan_core::Error> for Failure {
    fn from(e: fpan_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn run() -> Result<(), Failure> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Failure::Usage(e.render().to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => commands::gen_data(config::merge(a, sub, config)?),
        Command::Train(a) => commands::train(config::merge(a, sub, config)?),
        Command::Sample(a) => commands::sample(config::merge(a, sub, config)?),
        Command::Eval(a) => commands::eval(config::merge(a, sub, config)?),
        Command::Sweep(a) => commands::sweep(config::merge(a, sub, config)?),
        Command::FitCurve(a) => commands::fit_curve(config::merge(a, sub, config)?),
        Command::VerifyStats(a) => commands::verify_stats(config::merge(a, sub, config)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => eprintln!("{}", msg.trim_end()),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(failure.exit_code())
        }
    }
}
