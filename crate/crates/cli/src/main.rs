//! Command-line driver for the full experiment protocol: data generation,
//! CTC and LM pretraining, mixed-modal fine-tuning, perturbation evals, the
//! decoder-variant ablation, and report assembly.
//!
//! Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric
//! failure, 1 anything else.

mod commands;
mod evalrun;
mod report;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use ctxasr_core::Error;

#[derive(Parser)]
#[command(name = "ctxasr", version, about = "Contextual ASR at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and lexicon into OUT/corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the audio encoder with CTC; writes OUT/ctc.
    PretrainCtc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Pretrain the decoder base LM on corpus text; writes OUT/lm.
    PretrainLm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Fine-tune the joint model from both pretrains; writes OUT/finetune.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the eval split under one condition.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bundle directory; defaults to OUT/finetune.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["on", "off"], default_value = "on")]
        context: String,
        #[arg(long, value_parser = ["none", "remove", "random", "respell-replace", "respell-append", "ground-truth"], default_value = "none")]
        perturb: String,
        #[arg(long, value_parser = ["causal", "prefix"], default_value = "causal")]
        mask: String,
    },
    /// Train and evaluate both decoder variants with identical data/seeds.
    AblateDecoder {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one variant (default: both).
        #[arg(long, value_parser = ["decoder-only", "encoder-decoder"])]
        variant: Option<String>,
    },
    /// Merge eval results from one or more run directories into a report.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() {
    ctxasr_core::trainer::init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::PretrainCtc { config, out, resume } => commands::pretrain_ctc(&config, &out, resume),
        Command::PretrainLm { config, out, resume } => commands::pretrain_lm(&config, &out, resume),
        Command::Train { config, out, resume } => commands::train(&config, &out, resume),
        Command::Eval { config, out, checkpoint, context, perturb, mask } => {
            evalrun::eval(&config, &out, checkpoint.as_deref(), &context, &perturb, &mask)
        }
        Command::AblateDecoder { config, out, variant } => {
            commands::ablate_decoder(&config, &out, variant.as_deref())
        }
        Command::Report { runs, out } => report::report(&runs, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
