//! `itm`: synthetic data, two-phase training, mining, evaluation and CIDEr
//! scoring from the command line.

mod cider;
mod common;
mod eval;
mod mine;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use itm_core::ErrorCategory;

#[derive(Debug, Parser)]
#[command(name = "itm", version, about = "Image-text matching: training, mining and retrieval evaluation")]
struct Cli {
    /// overrides the seed of the synthetic generator or the training config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: a training config for train/mine, a generator config for synth
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// more progress output; repeat for per-step lines
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with a manifest
    Synth(synth::Args),
    /// Train phase 1 (triplet), phase 2 (mined hierarchical) or both
    Train(train::Args),
    /// Mine hard negatives and write one quadruple per anchor
    Mine(mine::Args),
    /// Recall@K in both directions, optionally re-ranking image queries
    Eval(eval::EvalArgs),
    /// Score candidate captions against reference captions
    Cider(cider::Args),
    /// Top matches for one image or caption
    Query(eval::QueryArgs),
}

pub struct Globals {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub verbose: u8,
}

fn category_name(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::Input => "input",
        ErrorCategory::Io => "io",
        ErrorCategory::Format => "format",
        ErrorCategory::Numeric => "numeric",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        seed: cli.seed,
        config: cli.config,
        verbose: cli.verbose,
    };
    let result = match cli.command {
        Command::Synth(a) => synth::run(&globals, a),
        Command::Train(a) => train::run(&globals, a),
        Command::Mine(a) => mine::run(&globals, a),
        Command::Eval(a) => eval::run_eval(&globals, a),
        Command::Cider(a) => cider::run(&globals, a),
        Command::Query(a) => eval::run_query(&globals, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error ({}): {e}", category_name(cat));
            ExitCode::from(cat.exit_code())
        }
    }
}
