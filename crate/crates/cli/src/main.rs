mod commands;
mod config;
mod error;
mod manifest;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use error::{CliError, Kind};
use occlass_core::taxonomy::Scheme;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "occlass", version, about = "Hierarchical occupation classification of job advertisements")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for every random choice; overrides `train.seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 forces the sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Taxonomy scheme (ons2010, ons2020, onet2019, custom).
    #[arg(long, global = true, default_value = "ons2020")]
    pub scheme: Scheme,
    /// TOML file with nested settings; flags win on conflict.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus against a taxonomy and split it into train and test sets.
    Ingest(commands::ingest::IngestArgs),
    /// Token-length distribution of a field.
    Stats(commands::stats::StatsArgs),
    /// Train a classifier and write a model file.
    Train(commands::train::TrainArgs),
    /// Search hyper-parameters with cross-validation.
    Tune(commands::tune::TuneArgs),
    /// Predict occupation codes with one model or a weighted ensemble.
    Predict(commands::predict::PredictArgs),
    /// Score a prediction file against gold labels.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Predict with an ensemble described by a TOML file.
    Ensemble(commands::predict::EnsembleArgs),
}

fn clap_failure(e: clap::Error) -> CliError {
    let flag = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => Some(s.clone()),
        Some(ContextValue::Strings(v)) => v.first().cloned(),
        _ => None,
    };
    let rendered = e.render().to_string();
    // First paragraph only, without the usage block.
    let message = rendered
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ")
        .trim_start_matches("error: ")
        .to_string();
    CliError { flag, ..CliError::new(Kind::Usage, message) }
}

fn init_logging(g: &GlobalArgs) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    // Environment variables are deliberately not consulted.
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> error::Result<()> {
    init_logging(&cli.global);
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::usage("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage("--threads", e))?;
    }
    let ctx = commands::Context::new(&cli.global)?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest::run(&ctx, a),
        Command::Stats(a) => commands::stats::run(&ctx, a),
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Tune(a) => commands::tune::run(&ctx, a),
        Command::Predict(a) => commands::predict::run(&ctx, a),
        Command::Evaluate(a) => commands::evaluate::run(&ctx, a),
        Command::Ensemble(a) => commands::predict::run_ensemble(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = clap_failure(e);
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.error.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_line());
            ExitCode::from(err.error.exit_code())
        }
    }
}
