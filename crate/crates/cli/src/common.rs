//! Helpers shared by the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use geovocab_core::gateway::{ChatBackend, ChatRequest, ChatResponse, Gateway, GatewayConfig, GatewayError};
use geovocab_core::model::CategoryPool;
use geovocab_core::tensor_io::{load_standards, TensorIoError};
use geovocab_core::StandardsStore;

use crate::error::{at_path, CliError, CliResult};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp", "webp"];

/// A built-in pool tag (`loveda`, `gid5`) or a pool JSON file.
pub fn load_pool(spec: &str) -> CliResult<CategoryPool> {
    if let Some(pool) = CategoryPool::builtin(spec) {
        return Ok(pool);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(CliError::config(format!(
            "--pool {spec:?} is neither a built-in pool tag nor a readable file"
        )));
    }
    load_pool_file(path)
}

pub fn load_pool_file(path: &Path) -> CliResult<CategoryPool> {
    let bytes = std::fs::read(path).map_err(at_path(path))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("pool {}: {e}", path.display())))
}

pub fn require_pool(spec: Option<&str>) -> CliResult<CategoryPool> {
    load_pool(spec.ok_or_else(|| CliError::config("--pool is required for this command"))?)
}

/// Loads a standards file and checks it was distilled for `pool`.
pub fn load_store(path: &Path, pool: &CategoryPool) -> CliResult<StandardsStore> {
    let store = load_standards(path).map_err(|e| match e {
        TensorIoError::Io(_) => CliError::data(format!("{}: {e}", path.display())),
        e => CliError::data(format!("standards {}: {e}", path.display())),
    })?;
    let names = |p: &CategoryPool| p.names().map(str::to_string).collect::<Vec<_>>();
    if names(store.pool()) != names(pool) {
        return Err(CliError::config(format!(
            "standards {} were distilled for pool {:?}, not {:?}",
            path.display(),
            names(store.pool()),
            names(pool)
        )));
    }
    Ok(store)
}

/// Flag-level gateway overrides; flags beat environment variables, which
/// beat config file values only when those are unset.
#[derive(Debug, Clone, Default)]
pub struct GatewayFlags {
    pub mock_fixtures: Option<PathBuf>,
    pub api_url: Option<String>,
    pub model: Option<String>,
}

impl GatewayFlags {
    pub fn apply(&self, mut config: GatewayConfig) -> GatewayConfig {
        if let Some(dir) = &self.mock_fixtures {
            config.mock_fixture_dir = Some(dir.clone());
        }
        if let Some(url) = &self.api_url {
            config.endpoint_url = Some(url.clone());
        }
        if let Some(model) = &self.model {
            config.model_name = model.clone();
        }
        config.with_env_defaults()
    }
}

/// Logs every model call by schema so bypassed stages are visible.
pub struct LoggedBackend {
    inner: Gateway,
}

impl LoggedBackend {
    pub fn build(config: &GatewayConfig) -> CliResult<Self> {
        let inner = Gateway::from_config(config)?;
        log::debug!("gateway backend: {:?}", inner.kind());
        Ok(Self { inner })
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.inner, Gateway::Mock(_))
    }
}

impl ChatBackend for LoggedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        log::info!("model call: {}", request.response_schema_id);
        self.inner.complete(request)
    }
}

/// Expands files and directories into a sorted list of image files.
pub fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = list_with_extensions(input, IMAGE_EXTENSIONS)?;
            out.append(&mut found);
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            return Err(CliError::data(format!("{}: no such file or directory", input.display())));
        }
    }
    Ok(out)
}

/// Files directly inside `dir` whose extension (case-insensitive) is in
/// `extensions`, sorted by path.
pub fn list_with_extensions(dir: &Path, extensions: &[&str]) -> CliResult<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(at_path(dir))? {
        let path = entry.map_err(at_path(dir))?.path();
        let matches = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .is_some_and(|e| extensions.contains(&e.as_str()));
        if path.is_file() && matches {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// `stem -> path` for every `.npy` file in `dir`.
pub fn npy_by_stem(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for path in list_with_extensions(dir, &["npy"])? {
        map.insert(file_stem(&path), path);
    }
    Ok(map)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn build_time() -> CliResult<DateTime<Utc>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) if !s.trim().is_empty() => {
            let secs: i64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("SOURCE_DATE_EPOCH {s:?} is not an integer")))?;
            Utc.timestamp_opt(secs, 0)
                .single()
                .ok_or_else(|| CliError::config(format!("SOURCE_DATE_EPOCH {s:?} is out of range")))
        }
        _ => Ok(Utc::now()),
    }
}

pub fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    geovocab_core::fsio::write_atomic(path, bytes).map_err(at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tags_resolve() {
        assert_eq!(load_pool("loveda").unwrap().len(), 7);
        assert_eq!(load_pool("gid5").unwrap().len(), 6);
        assert_eq!(load_pool("/definitely/not/here.json").unwrap_err().exit_code(), 3);
    }

    #[test]
    fn directories_expand_to_sorted_images() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.BMP", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let found = collect_images(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = found.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect();
        assert_eq!(names, ["a.BMP", "b.png"]);
    }
}
