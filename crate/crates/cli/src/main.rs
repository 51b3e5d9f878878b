//! `hallu`: judge, score and compare object-hallucination runs.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "hallu",
    version,
    about = "Object hallucination evaluation for vision-language model descriptions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every configured subcommand accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives run artifacts.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

/// Dataset inputs shared by several subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Class vocabulary (TOML).
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    /// COCO-format instances file.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// JSON array of image ids restricting the dataset.
    #[arg(long)]
    pub subset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask every judge every question about every (image, class) cell.
    Judge {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Model responses (JSONL).
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Judge answer cache (JSONL, append-only).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Maximum judge calls in flight.
        #[arg(long)]
        concurrency: Option<usize>,
        /// Print the plan and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Vote a judgement tensor into predictions and emit the metric report.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Tensor file; defaults to the one produced by `judge` with the same config.
        #[arg(long)]
        tensor: Option<PathBuf>,
        /// Votes needed to decide a cell (defaults to unanimity).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Closed yes/no question protocol.
    Pope {
        #[command(subcommand)]
        action: PopeAction,
    },
    /// Caption hallucination rates of the responses.
    Chair {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// COCO-format captions file extending the ground truth.
        #[arg(long)]
        captions: Option<PathBuf>,
    },
    /// Generate object-enumeration training records.
    Augment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        negatives: Option<usize>,
        /// Co-occurrence bias weight in [0, 1].
        #[arg(long)]
        bias: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pick an evaluation subset covering every class.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank correlation between two leaderboards.
    Correlate {
        a: PathBuf,
        b: PathBuf,
        /// Compare metric NAME_A of the first file with NAME_B of the second
        /// (`NAME_A:NAME_B`, repeatable). Defaults to every shared metric.
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
    /// Merge run reports into a leaderboard.
    Report {
        #[command(flatten)]
        common: Common,
        /// `report.json` files from score, pope score or chair runs.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PopeAction {
    /// Write the question set.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = PopeMode::Original)]
        mode: PopeMode,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a model's answers to a question set.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        questions: PathBuf,
        /// JSONL with image_id, class_id and response.
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        model_id: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PopeMode {
    /// Seeded image subset with sampled positives and negatives.
    Original,
    /// Every class for every image.
    Complete,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.kind.code())
        }
    }
}
