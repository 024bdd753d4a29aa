//! `pcolab`: corpus generation, fine-tuning, pair mining, preference
//! training, the iterative loop, evaluation and verification.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcolab::losses::LossVariant;

#[derive(Parser)]
#[command(name = "pcolab", version, about = "Pairwise Cringe preference optimization lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Experiment config (JSON). Defaults to the reference toy config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the training precision.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSource {
    /// Blocked-greedy winner against a repeating greedy loser.
    Repetition,
    /// Best and worst of sampled responses under the configured reward.
    Reward,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus and its vocabulary.
    GenCorpus,
    /// Fine-tune a fresh model on the corpus with cross-entropy.
    Sft,
    /// Build the original preference pairs from the fine-tuned model.
    MakePairs {
        #[arg(long, value_enum, default_value = "repetition")]
        source: PairSource,
    },
    /// Train one preference loss from the fine-tuned model.
    Train {
        /// ce, binary-cringe, pairwise-cringe, hard-margin-cringe, dpo or unlikelihood.
        #[arg(long)]
        loss: Option<LossVariant>,
    },
    /// Run the iterative generate-label-retrain loop.
    Pco {
        /// Number of iterations (the config default is 2).
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        loss: Option<LossVariant>,
    },
    /// Score a checkpoint against the fine-tuned baseline on held-out prompts.
    Eval {
        /// Checkpoint to evaluate; defaults to the fine-tuned model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every loss, or the full oracle suite.
    Gradcheck {
        #[arg(long)]
        full: bool,
    },
    /// Comparison table over run records.
    Report {
        /// Run record files; defaults to every record in the reports directory.
        records: Vec<PathBuf>,
        /// Also write a bar chart of win rates.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Print the effective config as JSON.
    Config,
}

fn init_threads() {
    if let Some(n) = std::env::var("PCOLAB_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads();
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = commands::categorize(&e);
            let msg = format!("{e:#}");
            eprintln!("{}", serde_json::json!({ "error": category, "message": msg }));
            ExitCode::from(code)
        }
    }
}
