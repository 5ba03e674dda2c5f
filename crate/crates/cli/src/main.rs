//! `dct`: train, evaluate and analyse compressive transformers with a learned memory judger.

mod analyze;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dct_core::JudgeMode;

#[derive(Parser, Debug)]
#[command(
    name = "dct",
    version,
    about = "Compressive transformer with a learned keep/discard memory judger"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Raw byte corpus.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Caps the number of steps this invocation runs.
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// Output directory; every artifact is written below it (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl Global {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains the language model alone for the configured pretraining epochs.
    Pretrain,
    /// Co-trains model and judger, resuming from a training checkpoint if given.
    Cotrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reports loss, perplexity and BPC of a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "valid", value_parser = ["valid", "test"])]
        split: String,
        /// Memory policy during evaluation; defaults to the checkpoint's.
        #[arg(long)]
        judge: Option<JudgeMode>,
    },
    /// Builds reading-distance and keep-fraction series from a run directory.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Trailing window for the smoothed keep fraction.
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Prints a checkpoint's header as JSON.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Pretrain => commands::pretrain(g),
        Command::Cotrain { checkpoint } => commands::cotrain(g, checkpoint.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            judge,
        } => commands::eval(g, &checkpoint, &split, judge),
        Command::Analyze { run, window } => analyze::run(g, &run, window),
        Command::InspectCheckpoint { checkpoint } => commands::inspect(g, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
