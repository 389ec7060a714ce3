mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::commands::{AblateArgs, AnalyzeArgs, NormalizeArgs, RunArgs, TrainArgs, ValidateArgs};
use crate::config::ConfigFile;

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    /// Bad flags, config file or missing inputs.
    #[error("{0}")]
    Usage(String),

    /// The model failed a check; the report has already been printed.
    #[error("{0}")]
    Rejected(String),

    #[error(transparent)]
    Core(#[from] spikeconv::Error),

    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use spikeconv::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io(..) => 2,
            CliError::Rejected(_) => 1,
            CliError::Core(e) => match e {
                E::Argument(_) | E::Dataset(_) | E::Io(_) => 2,
                E::Shape(_)
                | E::Structural { .. }
                | E::Constraint(_)
                | E::Format(_)
                | E::ConversionIncomplete(_)
                | E::DegenerateLayer(_)
                | E::ZeroThreshold(_)
                | E::Diverged { .. } => 1,
            },
        }
    }
}

/// Converts trained analog networks into integrate-and-fire spiking networks
/// by threshold balancing, and simulates them.
#[derive(Parser, Debug)]
#[command(name = "snnconv", version, about)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// TOML file with defaults: top-level `jobs`/`seed`, plus one table per
    /// subcommand keyed by its long flag names.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a model against the convertibility constraints.
    Validate(ValidateArgs),
    /// Train a reference architecture on a digits dataset.
    Train(TrainArgs),
    /// Compute spiking thresholds and write them beside the model.
    Normalize(NormalizeArgs),
    /// Simulate the spiking network on a dataset and report its error.
    Run(RunArgs),
    /// Spike-count profile and synaptic-operation census.
    Analyze(AnalyzeArgs),
    /// Train and convert the residual network at every constraint level.
    Ablate(AblateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    if let Some(n) = cli.jobs.or_else(|| file.as_ref().and_then(ConfigFile::jobs)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    }
    let file = file.as_ref();
    match cli.command {
        Command::Validate(a) => commands::validate(a, file),
        Command::Train(a) => commands::train(a, file),
        Command::Normalize(a) => commands::normalize(a, file),
        Command::Run(a) => commands::run(a, file),
        Command::Analyze(a) => commands::analyze(a, file),
        Command::Ablate(a) => commands::ablate(a, file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
