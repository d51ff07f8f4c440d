mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use avalign::train::Variant;
use clap::{Args, Parser, Subcommand};

/// Visual speech recognition with audio-unit alignment on synthetic corpora.
///
/// Any configuration key can be overridden as `--section.key value`,
/// for example `--train.epochs 5` or `--model.d_model=16`.
#[derive(Debug, Parser)]
#[command(name = "avalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, clustering and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training variant: s1 (video only), s2 (cross-attention), s3 (cross-attention and alignment loss).
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Generate,
    /// Cluster audio frames with k-means and write the unit bank.
    Quantize,
    /// Train a model and write metrics and a checkpoint.
    Train,
    /// Decode a corpus split with a checkpoint and report WER and CER.
    Eval,
    /// Dump one utterance's attention over the unit bank.
    InspectAlignment {
        /// Utterance id (defaults to `inspect.utterance`, then the first validation utterance).
        #[arg(long)]
        utterance: Option<String>,
    },
}

/// Failure class, mapped to the process exit code.
pub enum Failure {
    /// Bad arguments or configuration (exit 1).
    Usage(anyhow::Error),
    /// Anything that goes wrong after the inputs were accepted (exit 2).
    Runtime(anyhow::Error),
}

impl From<avalign::Error> for Failure {
    fn from(e: avalign::Error) -> Self {
        match e {
            avalign::Error::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match config::extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command, cli.common, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
