//! `distill`: pool to standards file.

use std::path::{Path, PathBuf};

use geovocab_core::distill::{build_standards, DistillConfig};
use geovocab_core::model::StandardSource;
use geovocab_core::prompts::PromptTemplates;
use geovocab_core::tensor_io::save_standards;

use crate::common::{build_time, require_pool, GatewayFlags, LoggedBackend};
use crate::error::{at_path, CliError, CliResult};
use crate::GlobalArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct DistillArgs {
    /// Standards JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON list of `[a, b]` category pairs; skips the pair-proposal call.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

pub fn load_pairs(path: &Path) -> CliResult<Vec<(String, String)>> {
    let bytes = std::fs::read(path).map_err(at_path(path))?;
    let pairs: Vec<[String; 2]> = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::config(format!("pairs file {}: {e}", path.display())))?;
    Ok(pairs.into_iter().map(|[a, b]| (a, b)).collect())
}

pub fn load_prompts(dir: Option<&Path>) -> CliResult<PromptTemplates> {
    match dir {
        Some(d) => PromptTemplates::with_overrides(d)
            .map_err(|e| CliError::config(format!("prompt overrides {}: {e}", d.display()))),
        None => Ok(PromptTemplates::builtin()),
    }
}

pub fn run(global: &GlobalArgs, args: &DistillArgs) -> CliResult<()> {
    let pool = require_pool(global.pool.as_deref())?;
    let gateway_config = global.gateway_flags().apply(Default::default());
    let backend = LoggedBackend::build(&gateway_config)?;
    let config = DistillConfig {
        prompts: load_prompts(args.prompts.as_deref())?,
        override_pairs: args.pairs.as_deref().map(load_pairs).transpose()?,
        source: if backend.is_mock() {
            StandardSource::Fixture
        } else {
            StandardSource::Mllm
        },
        created_at: Some(build_time()?),
        ..DistillConfig::default()
    };
    let outcome = build_standards(&pool, &backend, &config).map_err(|e| CliError::from(e).context("distill"))?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    save_standards(&outcome.store, &args.out).map_err(at_path(&args.out))?;
    log::info!(
        "wrote {} standards and {} rules to {}",
        outcome.store.standards().len(),
        outcome.store.rules().len(),
        args.out.display()
    );
    Ok(())
}

impl GlobalArgs {
    pub fn gateway_flags(&self) -> GatewayFlags {
        GatewayFlags {
            mock_fixtures: self.mock_fixtures.clone(),
            api_url: self.api_url.clone(),
            model: self.model.clone(),
        }
    }
}
