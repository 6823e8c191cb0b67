//! Command-line entry point: gen, train, sample, eval.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dosediff::commands::{self, EvalArgs, GenArgs, SampleArgs, TrainArgs};
use dosediff::phantom::Split;

#[derive(Parser)]
#[command(
    name = "dosediff",
    about = "Diffusion-based dose prediction with a selective state-space denoiser",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        val: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        /// Square grid extent; must divide by patch-size * 2^depth.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        patch_size: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser on a dataset's train split.
    Train {
        /// TOML run configuration; defaults are desk-scale.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from out/checkpoint.bin if present.
        #[arg(long)]
        resume: bool,
    },
    /// Sample dose maps from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of split samples to predict (in split order).
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler step stride (1 = every step).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Evaluate stored predictions against ground truth.
    Eval {
        /// Directory holding pred_NNNN.bin files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn run() -> dosediff::Result<()> {
    match Cli::parse().command {
        Command::Gen {
            out,
            train,
            val,
            test,
            size,
            seed,
            patch_size,
            depth,
            force,
        } => commands::cmd_gen(&GenArgs {
            out,
            n_train: train,
            n_val: val,
            n_test: test,
            size,
            seed,
            patch_size,
            depth,
            force,
        }),
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            batch_size,
            resume,
        } => commands::cmd_train(&TrainArgs {
            config,
            data,
            out,
            epochs,
            seed,
            batch_size,
            resume,
        }),
        Command::Sample {
            checkpoint,
            data,
            out,
            split,
            n,
            seed,
            stride,
        } => commands::cmd_sample(&SampleArgs {
            checkpoint,
            data,
            out,
            split: split.parse::<Split>()?,
            n,
            seed,
            stride,
        }),
        Command::Eval {
            pred,
            data,
            out,
            split,
        } => commands::cmd_eval(&EvalArgs {
            pred,
            data,
            out,
            split: split.parse::<Split>()?,
        }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
