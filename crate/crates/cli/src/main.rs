//! `spikeyolo` command-line tool.
//!
//! Exit codes: 0 ok, 1 verification failure or divergence, 2 I/O error,
//! 3 format / config error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "spikeyolo", version, about = "Spike-driven detector: inference, verification, energy, events, training")]
pub struct Cli {
    /// Model config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// SFW1 weights file.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Override the number of timesteps.
    #[arg(long = "T", global = true)]
    pub t: Option<usize>,
    /// Override the number of virtual timesteps.
    #[arg(long = "D", global = true)]
    pub d: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolarityArg {
    Two,
    Combined,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Detect objects in an SFT1 image; prints JSON lines.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Write detections here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the energy report as CSV.
        #[arg(long)]
        energy_csv: Option<PathBuf>,
        /// Override the confidence threshold.
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Check slot-expansion and re-parameterization equivalence.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Per-layer energy report for one input.
    Energy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Human-readable table instead of CSV.
        #[arg(long)]
        table: bool,
    },
    /// Aggregate an SFE1 event file into an SFT1 tensor.
    Events {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Slice length in microseconds.
        #[arg(long)]
        dt: u64,
        /// Window end (exclusive, microseconds); defaults to just after the last event.
        #[arg(long)]
        t_end: Option<u64>,
        #[arg(long, value_enum, default_value = "two")]
        polarity: PolarityArg,
    },
    /// Fold batch norm and merge rep chains of train-mode weights.
    Reparam {
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on the synthetic shapes set described by the config.
    TrainToy {
        #[arg(long)]
        output: PathBuf,
        /// Per-epoch JSON lines log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
