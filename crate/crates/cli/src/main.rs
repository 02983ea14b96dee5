mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tsft", version, about = "Adapt a frozen univariate time-series backbone to multivariate tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a backbone by masked patch reconstruction and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one strategy on top of a pretrained backbone.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the strategy kind from the config.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the metrics of a fine-tuned run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Use this backbone directory instead of the one recorded in the run.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Run a strategy × seed matrix and summarize it.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategies; defaults to all five unless `--k-sweep` is given.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Prompt sizes for extra gen-p cells.
        #[arg(long, value_delimiter = ',')]
        k_sweep: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Reuse a pretrained backbone instead of pretraining from the config.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every parameterized component in f64.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        draws: usize,
    },
    /// Write a synthetic dataset as long-format CSV.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        /// Samples (channel-mix) or series (forecast).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    ChannelMix,
    Forecast,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Pretrain { config, out } => commands::pretrain(&config, &out),
        Command::Finetune { backbone, config, strategy, seed, out } => {
            commands::finetune(&backbone, &config, strategy.as_deref(), seed, &out)
        }
        Command::Eval { run, split, backbone } => commands::eval(&run, split, backbone.as_deref()),
        Command::Bench { config, strategies, seeds, k_sweep, jobs, backbone, out } => {
            commands::bench(commands::BenchArgs {
                config: &config,
                strategies: &strategies,
                seeds,
                k_sweep: &k_sweep,
                jobs,
                backbone: backbone.as_deref(),
                out: &out,
            })
        }
        Command::Gradcheck { config, draws } => commands::gradcheck(config.as_deref(), draws),
        Command::Synth { kind, out, samples, channels, length, seed } => {
            commands::synth(kind, &out, samples, channels, length, seed)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let line = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
