//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use geovocab_core::align::AlignmentConfig;
use geovocab_core::digest::sha256_hex;
use geovocab_core::gateway::GatewayConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Which ablation configuration a pipeline run reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Segment every image with the whole pool; no reasoning.
    FullPoolBaseline,
    /// Whole pool, with standards-enriched class descriptions recorded.
    MllmDescriptionsOnly,
    /// Full reasoning chain and vocabulary-restricted segmentation.
    GrCot,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FullPoolBaseline => "full_pool_baseline",
            Self::MllmDescriptionsOnly => "mllm_descriptions_only",
            Self::GrCot => "gr_cot",
        }
    }

    pub fn needs_standards(self) -> bool {
        !matches!(self, Self::FullPoolBaseline)
    }
}

/// Paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pool_path: PathBuf,
    #[serde(default)]
    pub standards_path: Option<PathBuf>,
    pub features_dir: PathBuf,
    pub embeddings_path: PathBuf,
    /// Row-to-category sidecar; defaults to the embeddings path with a
    /// `.json` extension.
    #[serde(default)]
    pub sidecar_path: Option<PathBuf>,
    pub images_dir: PathBuf,
    #[serde(default)]
    pub gt_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    pub mode: Mode,
}

/// A parsed config with every path made absolute.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: PipelineConfig,
    pub pool_path: PathBuf,
    pub standards_path: Option<PathBuf>,
    pub features_dir: PathBuf,
    pub embeddings_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub images_dir: PathBuf,
    pub gt_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub gateway: GatewayConfig,
    /// Digest of the config file bytes.
    pub digest: String,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<ResolvedConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::config(format!("reading config {}: {e}", path.display())))?;
        let raw: PipelineConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::config(format!("parsing config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut resolved = raw.resolve(base);
        resolved.digest = sha256_hex(&bytes);
        Ok(resolved)
    }

    pub fn resolve(self, base: &Path) -> ResolvedConfig {
        let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let embeddings_path = at(&self.embeddings_path);
        let sidecar_path = match &self.sidecar_path {
            Some(p) => at(p),
            None => embeddings_path.with_extension("json"),
        };
        let mut gateway = self.gateway.clone();
        if let Some(dir) = &gateway.mock_fixture_dir {
            gateway.mock_fixture_dir = Some(at(dir));
        }
        ResolvedConfig {
            pool_path: at(&self.pool_path),
            standards_path: self.standards_path.as_deref().map(at),
            features_dir: at(&self.features_dir),
            embeddings_path,
            sidecar_path,
            images_dir: at(&self.images_dir),
            gt_dir: self.gt_dir.as_deref().map(at),
            output_dir: at(&self.output_dir),
            gateway,
            digest: String::new(),
            raw: self,
        }
    }
}

impl ResolvedConfig {
    pub fn mode(&self) -> Mode {
        self.raw.mode
    }

    /// Checks that every input exists and that the mode has what it needs.
    pub fn validate(&self) -> CliResult<()> {
        let mut missing = Vec::new();
        let mut need = |label: &str, p: &Path, dir: bool| {
            let ok = if dir { p.is_dir() } else { p.is_file() };
            if !ok {
                missing.push(format!("{label} {}", p.display()));
            }
        };
        need("pool_path", &self.pool_path, false);
        need("features_dir", &self.features_dir, true);
        need("embeddings_path", &self.embeddings_path, false);
        need("sidecar_path", &self.sidecar_path, false);
        need("images_dir", &self.images_dir, true);
        if let Some(gt) = &self.gt_dir {
            need("gt_dir", gt, true);
        }
        match (&self.standards_path, self.mode().needs_standards()) {
            (Some(p), _) => need("standards_path", p, false),
            (None, true) => {
                return Err(CliError::config(format!(
                    "mode {} requires standards_path",
                    self.mode().as_str()
                )))
            }
            (None, false) => {}
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("missing inputs: {}", missing.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "pool_path": "pool.json",
            "features_dir": "features",
            "embeddings_path": "emb/e.npy",
            "images_dir": "/abs/images",
            "output_dir": "out",
            "mode": "gr_cot",
            "gateway": {"mock_fixture_dir": "fixtures"}
        })
    }

    #[test]
    fn relative_paths_resolve_against_the_config_dir() {
        let raw: PipelineConfig = serde_json::from_value(minimal()).unwrap();
        let r = raw.resolve(Path::new("/runs/a"));
        assert_eq!(r.pool_path, Path::new("/runs/a/pool.json"));
        assert_eq!(r.images_dir, Path::new("/abs/images"));
        assert_eq!(r.sidecar_path, Path::new("/runs/a/emb/e.json"));
        assert_eq!(r.gateway.mock_fixture_dir.as_deref(), Some(Path::new("/runs/a/fixtures")));
    }

    #[test]
    fn gr_cot_requires_standards() {
        let raw: PipelineConfig = serde_json::from_value(minimal()).unwrap();
        let err = raw.resolve(Path::new("/nowhere")).validate().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.message.contains("standards_path"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = minimal();
        v["colour"] = serde_json::json!("red");
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());
    }
}
