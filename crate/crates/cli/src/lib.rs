//! Command-line driver: config resolution, subcommands and report export.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, Overrides, SEED_ENV};
use crate::error::{CliError, EXIT_OK, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(
    name = "probembed",
    version,
    about = "Probabilistic cross-modal embeddings: synthetic data, training and evaluation",
    after_help = "Config precedence: built-in defaults < --config file < PROBEMBED_SEED < flags.\n\
                  Exit codes: 0 success, 1 usage or validation error, 2 runtime failure."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat TOML run config.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; the value is parsed as TOML, else as a string. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Seed for every random stream (overrides PROBEMBED_SEED and the file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for all inputs and outputs of the pipeline.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData,
    /// Train the dual encoder on the train split.
    Train,
    /// Encode the test split into image and text embedding stores.
    Encode,
    /// Recall@K in both directions and RSUM.
    EvalRetrieval,
    /// Zero-shot classification against encoded class prompts.
    EvalZeroshot,
    /// Risk-coverage curves, AURC and calibration.
    EvalSelective,
    /// Relative recall under image corruptions.
    EvalRobustness,
    /// Compare analytic gradients with central differences.
    Gradcheck,
    /// Convert a JSON report into CSV.
    ExportCsv {
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> Result<(), CliError> {
    if let Command::ExportCsv { report, output } = &cli.command {
        return commands::export(report, output);
    }
    let g = cli.global;
    let cfg = resolve(&Overrides { config: g.config, sets: g.sets, seed: g.seed, out_dir: g.out_dir }, env_seed)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Encode => commands::encode(&cfg),
        Command::EvalRetrieval => commands::eval_retrieval(&cfg),
        Command::EvalZeroshot => commands::eval_zeroshot(&cfg),
        Command::EvalSelective => commands::eval_selective(&cfg),
        Command::EvalRobustness => commands::eval_robustness(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::ExportCsv { .. } => unreachable!("handled above"),
    }
}

/// Runs the CLI with an explicit seed override (normally `PROBEMBED_SEED`)
/// and returns the process exit code.
pub fn run_with_env<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match dispatch(cli, env_seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs the CLI, reading the seed override from the environment.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(argv, env_seed.as_deref())
}
