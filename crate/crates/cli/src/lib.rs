//! Command line driver: `distill`, `reason`, `segment`, `eval` and
//! `pipeline`.

pub mod commands;
pub mod common;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "geovocab", version, about = "Image-adaptive vocabularies for remote sensing segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GlobalArgs {
    /// Category pool: a built-in tag (`loveda`, `gid5`) or a pool JSON file.
    #[arg(long, global = true)]
    pub pool: Option<String>,
    /// Answer model calls from this fixture directory instead of HTTP.
    #[arg(long, global = true, value_name = "DIR")]
    pub mock_fixtures: Option<PathBuf>,
    /// Worker threads for per-image work; defaults to the core count.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    pub log_level: log::LevelFilter,
    /// Chat-completions endpoint; falls back to `GEOVOCAB_API_URL`.
    #[arg(long, global = true, value_name = "URL")]
    pub api_url: Option<String>,
    /// Model name; falls back to `GEOVOCAB_MODEL`.
    #[arg(long, global = true)]
    pub model: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill interpretation standards for a category pool.
    Distill(commands::distill::DistillArgs),
    /// Run the reasoning chain over images and write traces.
    Reason(commands::reason::ReasonArgs),
    /// Label a feature map against a vocabulary.
    Segment(commands::segment::SegmentArgs),
    /// Score predicted rasters against ground truth.
    Eval(commands::eval::EvalArgs),
    /// Reason, segment and evaluate a corpus from a config file.
    Pipeline(commands::pipeline::PipelineArgs),
}

/// Sets up logging and the worker pool, then dispatches.
pub fn run(cli: Cli) -> CliResult<()> {
    let _ = env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .try_init();
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("worker pool already configured: {e}");
        }
    }
    let g = &cli.global;
    match &cli.command {
        Command::Distill(a) => commands::distill::run(g, a),
        Command::Reason(a) => commands::reason::run(g, a),
        Command::Segment(a) => commands::segment::run(g, a),
        Command::Eval(a) => commands::eval::run(g, a),
        Command::Pipeline(a) => commands::pipeline::run(g, a),
    }
}
