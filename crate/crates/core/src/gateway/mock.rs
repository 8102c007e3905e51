//! Fixture-driven mock backend.

use std::path::{Path, PathBuf};

use super::{fixture_key, BackendKind, ChatBackend, ChatRequest, ChatResponse, GatewayError};

/// Serves `{fixture_dir}/{fixture_key(request)}.json` verbatim.
///
/// Stateless: the response is a pure function of the request and the
/// directory contents.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dir: PathBuf,
}

impl MockBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(GatewayError::Config(format!(
                "mock fixture directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn fixture_path(&self, request: &ChatRequest) -> PathBuf {
        self.dir.join(format!("{}.json", fixture_key(request)))
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let path = self.fixture_path(request);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMissing {
                    key: fixture_key(request),
                    path: path.display().to_string(),
                })
            }
            Err(source) => {
                return Err(GatewayError::FixtureIo {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        log::debug!("mock completion {}", fixture_key(request));
        Ok(ChatResponse {
            text,
            backend: BackendKind::Mock,
            latency_ms: 0,
            attempt: 1,
        })
    }
}
