mod commands;
mod plot;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GRASS_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "grass",
    version,
    about = "Gradient-guided contrastive pretraining experiments",
    after_help = "Any config key can be overridden with `--section.key value`, e.g. `--train.batch_size 32`."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; replaces the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in defaults to start from.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Toy)]
    pub profile: Profile,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `$GRASS_OUTPUT_ROOT/<command>` or `runs/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Desk-scale schedule: 50 epochs, 30 warm-up, batch 32.
    Toy,
    /// Full schedule: 350 epochs, 150 warm-up, batch 256.
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic mosaic dataset (train and test splits).
    MakeData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Pretrain an encoder; writes checkpoints and runlog.jsonl.
    Pretrain {
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// One run per value, e.g. `warmup=0,50,100` or `threshold=0.3,0.5`.
        #[arg(long)]
        sweep: Option<String>,
        /// Record object-count statistics every epoch.
        #[arg(long)]
        observe: bool,
    },
    /// Fit a segmentation decoder on a labelled subset with the encoder frozen.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a fine-tuned decoder on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
    },
    /// Track distinct classes per sample for original, random-crop and guided-crop views.
    AnalyzeObjects {
        /// Observe training continued from this checkpoint; trains from scratch if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render loss attention maps and guided crops as PNG strips.
    VisualizeLam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `images/`; the test split is used if omitted.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Threshold for the attention region (default: the configured one).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Aggregate run directories into one comparison table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let (args, overrides) = match commands::split_overrides(std::env::args()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let cli = Cli::parse_from(args);
    match commands::dispatch(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
