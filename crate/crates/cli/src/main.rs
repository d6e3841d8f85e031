//! `default-moe`: train, compare, gradient-check and analyze Default MoE models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use default_moe::moe::RoutingMode;

#[derive(Parser, Debug)]
#[command(name = "default-moe", version, about = "Default MoE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.moe.top_k=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Comma-separated routing modes (topk, default, dense).
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<RoutingMode>,
    /// Scalar precision in bits. Defaults to 32, or 64 for gradcheck.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model in one routing mode.
    Train(Common),
    /// Train every mode for every seed on identical data and compare.
    Compare(Common),
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = commands::DEFAULT_FD_STEP)]
        fd_step: f64,
        /// Sequences in the checked batch.
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Tokens per sequence in the checked batch.
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
    },
    /// Router-gradient similarity to the dense gradient across K.
    Gradsim {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values; defaults to 1..N-1.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Default-mode training steps before the trained-phase measurement. 0 skips it.
        #[arg(long, default_value_t = 500)]
        warmup_steps: u64,
        /// Batches folded into the default vectors (no parameter update) before the init-phase measurement.
        #[arg(long, default_value_t = 50)]
        absorb_batches: u64,
        /// Batches averaged per seed.
        #[arg(long, default_value_t = 100)]
        batches: usize,
        /// Sequences per analysis batch.
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Routing statistics of a checkpoint on the validation split.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation windows to analyze.
        #[arg(long, default_value_t = 32)]
        windows: usize,
    },
    /// Training throughput per mode.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Untimed steps per mode before measuring.
        #[arg(long, default_value_t = 3)]
        warmup: u64,
        /// Timed windows per mode, interleaved across modes.
        #[arg(long, default_value_t = 10)]
        windows: usize,
        /// Optimizer steps per window.
        #[arg(long, default_value_t = 2)]
        steps_per_window: u64,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(c) => commands::train(&c, &argv),
        Command::Compare(c) => commands::compare(&c, &argv),
        Command::Gradcheck {
            common,
            tolerance,
            fd_step,
            batch_size,
            seq_len,
        } => commands::gradcheck(&common, &argv, tolerance, fd_step, batch_size, seq_len),
        Command::Gradsim {
            common,
            k,
            warmup_steps,
            absorb_batches,
            batches,
            batch_size,
        } => commands::gradsim(
            &common,
            &argv,
            &commands::GradsimArgs {
                k,
                warmup_steps,
                absorb_batches,
                batches,
                batch_size,
            },
        ),
        Command::Analyze {
            common,
            checkpoint,
            windows,
        } => commands::analyze(&common, &argv, &checkpoint, windows),
        Command::Bench {
            common,
            warmup,
            windows,
            steps_per_window,
        } => commands::bench(&common, &argv, warmup, windows, steps_per_window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
