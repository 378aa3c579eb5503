mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use mojidistill::train::TrainError;
use mojidistill::transfer::TransferError;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_EMPTY: u8 = 4;

/// Raised when a command ran but had nothing to write.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct EmptyOutput(pub String);

#[derive(Debug, Parser)]
#[command(name = "mojidistill", version, about = "Emoji distant supervision: preprocess, pretrain, transfer, evaluate")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, env = "MOJIDISTILL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting; wins over --config. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a small demo corpus, emoji set and labelled target task.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        size: usize,
    },
    /// Tokenize, filter, split and build a vocabulary.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        /// Emoji inventory; required unless --labeled.
        #[arg(long)]
        emoji_set: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Records already carry a `label`; no emoji expansion.
        #[arg(long)]
        labeled: bool,
    },
    /// Train a model from scratch on a preprocessed directory.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a pretrained checkpoint to a labelled target directory.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "chain-thaw")]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a labelled split file and report metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Other predictions on the same examples, for a bootstrap test.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Print the five most likely classes for one text.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        emoji_set: Option<PathBuf>,
        text: String,
    },
    /// Correlate predicted class probabilities and cluster the classes.
    Cluster {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emoji_set: Option<PathBuf>,
    },
    /// Word coverage of a target task under its own, the pretrained and the
    /// extended vocabulary.
    Coverage {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<EmptyOutput>() {
            return EXIT_EMPTY;
        }
        let train = match cause.downcast_ref::<TransferError>() {
            Some(TransferError::Train(t)) => Some(t),
            _ => cause.downcast_ref::<TrainError>(),
        };
        if train.is_some_and(TrainError::is_numerical) {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_INPUT
}
