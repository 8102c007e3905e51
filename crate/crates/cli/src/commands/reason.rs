//! `reason`: per-image reasoning traces.

use std::path::{Path, PathBuf};

use geovocab_core::gateway::ChatBackend;
use geovocab_core::model::ImageRef;
use geovocab_core::reason::{run_chain, ReasonConfig, ReasoningTrace};
use geovocab_core::StandardsStore;
use rayon::prelude::*;
use serde::Serialize;

use crate::common::{collect_images, load_store, require_pool, write_output, LoggedBackend};
use crate::commands::distill::load_prompts;
use crate::error::{at_path, CliError, CliResult, ExitKind};
use crate::GlobalArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct ReasonArgs {
    /// Standards JSON produced by `distill`.
    #[arg(long)]
    pub standards: PathBuf,
    /// Directory for `{image_hash}.trace.json` files.
    #[arg(long)]
    pub out: PathBuf,
    /// Record failures in `failures.json` and exit 0.
    #[arg(long)]
    pub keep_going: bool,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageFailure {
    pub image: String,
    pub stage: Option<String>,
    #[serde(skip)]
    pub kind: ExitKind,
    pub error: String,
}

/// Runs the chain over every image concurrently; results come back in input
/// order.
pub fn reason_images(
    images: &[PathBuf],
    store: &StandardsStore,
    backend: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Vec<Result<ReasoningTrace, ImageFailure>> {
    images
        .par_iter()
        .map(|path| reason_one(path, store, backend, config))
        .collect()
}

fn reason_one(
    path: &Path,
    store: &StandardsStore,
    backend: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Result<ReasoningTrace, ImageFailure> {
    let fail = |stage: Option<String>, e: CliError| ImageFailure {
        image: path.display().to_string(),
        stage,
        kind: e.kind,
        error: e.message,
    };
    let image = ImageRef::from_path(path).map_err(|e| fail(None, at_path(path)(e)))?;
    run_chain(&image, store, backend, config).map_err(|e| {
        let stage = e.stage().map(|s| s.to_string());
        fail(stage, CliError::from(e))
    })
}

pub fn run(global: &GlobalArgs, args: &ReasonArgs) -> CliResult<()> {
    let pool = require_pool(global.pool.as_deref())?;
    let store = load_store(&args.standards, &pool)?;
    let images = collect_images(&args.images)?;
    if images.is_empty() {
        return Err(CliError::data("no images found in the given inputs"));
    }
    let backend = LoggedBackend::build(&global.gateway_flags().apply(Default::default()))?;
    let config = ReasonConfig {
        prompts: load_prompts(args.prompts.as_deref())?,
        ..ReasonConfig::default()
    };

    let mut failures = Vec::new();
    let mut written = 0usize;
    for result in reason_images(&images, &store, &backend, &config) {
        match result {
            Ok(trace) => {
                log::debug!("{}: stage timings {:?}", trace.image.uri, trace.stage_timings_ms);
                for w in &trace.warnings {
                    log::warn!("{}: {w}", trace.image.uri);
                }
                trace.save(&args.out).map_err(at_path(&args.out))?;
                written += 1;
            }
            Err(f) => {
                log::error!("{}: {}", f.image, f.error);
                failures.push(f);
            }
        }
    }
    log::info!("wrote {written} traces to {}", args.out.display());

    if args.keep_going {
        let path = args.out.join("failures.json");
        let mut body = serde_json::to_string_pretty(&serde_json::json!({ "failures": failures }))
            .expect("failures serialize");
        body.push('\n');
        write_output(&path, body.as_bytes())?;
        return Ok(());
    }
    match failures.into_iter().next() {
        None => Ok(()),
        Some(f) => Err(CliError {
            kind: f.kind,
            message: format!("reason {}: {}", f.image, f.error),
        }),
    }
}
