//! Command-line front end for the trimodal library.
//!
//! One binary with subcommands, so an experiment script stays a single
//! reproducible file: generate a dataset, train, evaluate, search, render
//! figures, and summarize runs without touching library code. All figures are
//! emitted as files; there is no interactive windowing.
//!
//! Exit codes follow the usual convention: 0 when the subcommand fully
//! succeeded, 2 for usage and validation problems (including config
//! validation), 1 for runtime failures.

mod data;
mod eval;
mod gensynth;
mod render;
mod report;
mod search;
mod train;
mod visualize;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "trimodal",
    version,
    about = "Tri-modal contrastive training: datasets, two-stage training, evaluation, retrieval, and figures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset and export it to a directory.
    GenSynth(gensynth::Args),
    /// Run a training experiment from a TOML config, with flag overrides.
    Train(train::Args),
    /// Score a checkpoint: accuracy, macro F1, mAP@5, mAP, confusion matrix.
    Eval(eval::Args),
    /// Rank the most similar samples for a query id or image file.
    Search(search::Args),
    /// Render embeddings as a thumbnail grid or a 2-D scatter.
    Visualize(visualize::Args),
    /// Aggregate metrics across finished runs into one table.
    Report(report::Args),
}

/// Rust ignores SIGPIPE by default, which turns `trimodal report | head`
/// into a println panic once the reader goes away. Restoring the default
/// disposition makes a closed pipe end the process quietly, the way other
/// line-oriented tools behave.
fn reset_sigpipe() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => gensynth::run(&args),
        Command::Train(args) => train::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::Search(args) => search::run(&args),
        Command::Visualize(args) => visualize::run(&args),
        Command::Report(args) => report::run(&args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(if err.is_usage() { 2 } else { 1 });
    }
}
