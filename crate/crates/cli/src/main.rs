//! `revlab`: run the reversal-invariance checks and measurements.
//!
//! Exit status: 0 when every check passed (or the command only measures),
//! 1 when a check failed, 2 on usage, input or runtime errors.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    CheckInvarianceArgs, DivergenceArgs, MatchedTrainArgs, Output, TokenizerStabilityArgs,
};
use config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "revlab",
    version,
    about = "Reversal-invariance checks for autoregressive language models"
)]
struct Cli {
    /// TOML file with defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for JSON reports and CSV files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print a table instead of the JSON report.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Permutation equivariance and reversal invariance of the loss.
    CheckInvariance(CheckInvarianceArgs),
    /// Whether tokenization commutes with reversal on a corpus.
    TokenizerStability(TokenizerStabilityArgs),
    /// Entropy rate and time-reversal divergence of a chain or a corpus.
    Divergence(DivergenceArgs),
    /// Forward and mirrored training from matched initializations.
    MatchedTrain(MatchedTrainArgs),
}

fn run(cli: &Cli) -> anyhow::Result<Output> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = match &cli.command {
        Command::CheckInvariance(a) => commands::check_invariance(a, &file)?,
        Command::TokenizerStability(a) => commands::tokenizer_stability(a, &file)?,
        Command::Divergence(a) => commands::divergence(a, &file)?,
        Command::MatchedTrain(a) => commands::matched_train(a, &file)?,
    };
    for (name, contents) in &out.files {
        report::write_output(cli.out.as_deref(), name, contents)?;
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if cli.pretty {
                print!("{}", out.table);
            } else {
                print!("{}", out.json);
            }
            match out.passed {
                Some(false) => ExitCode::from(1),
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
