//! `icl`: generate data, train, evaluate, ablate, and inspect
//! interest-dictionary user encoders.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_core::data::Mode;
use icl_core::model::Variant;
use icl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "icl", version, about = "Multi-interest user representations with set-level contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Must set a top-level "seed".
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides "out_dir" from the config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (dataset.jsonl) and its labels (labels.tsv).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder and write checkpoint.bin, vocab.txt and history.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Target window contrasted with the history.
        #[arg(long, value_name = "short|long")]
        mode: Option<Mode>,
        /// Encoder/similarity variant.
        #[arg(long, value_name = "NAME")]
        variant: Option<Variant>,
    },
    /// Evaluate the checkpoint in the output directory; writes embeddings.tsv and metrics.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Expected mode of the checkpoint; a mismatch is an error.
        #[arg(long, value_name = "short|long")]
        mode: Option<Mode>,
    },
    /// Train and evaluate each variant under shared settings; writes ablation.txt and metrics.jsonl.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "short|long")]
        mode: Option<Mode>,
        /// Run a single variant instead of all three (id-icl, maxpool-cl, id-concat-cl).
        #[arg(long, value_name = "NAME")]
        variant: Option<Variant>,
    },
    /// Print dictionary utilization and the nearest tokens of every interest row.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Neighbors listed per interest row.
        #[arg(long, default_value_t = 5, value_name = "N")]
        neighbors: usize,
    },
    /// Check end-to-end gradients against finite differences on random tiny models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn error_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 1),
        Error::Contract(_) => ("contract", 2),
        Error::Data(_) => ("data", 2),
        Error::EmptyInput(_) => ("empty_input", 2),
        Error::Format { .. } => ("format", 2),
        Error::Io { .. } => ("io", 2),
        Error::Json(_) => ("json", 2),
        Error::Numeric { .. } => ("numeric", 3),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("error_code=usage");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train { common, mode, variant } => commands::train(&common, mode, variant),
        Command::Eval { common, mode } => commands::eval(&common, mode),
        Command::Ablate { common, mode, variant } => commands::ablate(&common, mode, variant),
        Command::Inspect { common, neighbors } => commands::inspect(&common, neighbors),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let (name, code) = error_code(&e);
            eprintln!("error: {e}");
            eprintln!("error_code={name}");
            ExitCode::from(code)
        }
    }
}
