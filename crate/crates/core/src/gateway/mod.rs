//! Uniform access to multimodal chat models.
//!
//! Two backends implement [`ChatBackend`]: [`HttpBackend`] speaks the
//! OpenAI-compatible chat-completions protocol, and [`MockBackend`] serves
//! fixture files keyed by [`fixture_key`]. Structured output is recovered from
//! model text with [`extract_json`].

mod http;
mod json;
mod mock;
#[cfg(any(test, feature = "test-support"))]
pub mod stub;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex_parts;
use crate::model::ImageRef;

pub use http::HttpBackend;
pub use json::{extract_json, JsonExtractError};
pub use mock::MockBackend;

pub const API_KEY_ENV: &str = "GEOVOCAB_API_KEY";
pub const API_URL_ENV: &str = "GEOVOCAB_API_URL";
pub const MODEL_ENV: &str = "GEOVOCAB_MODEL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserPart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response_schema_id: String,
}

impl ChatRequest {
    pub fn new(response_schema_id: impl Into<String>, system_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_parts: Vec::new(),
            temperature: 0.0,
            max_tokens: 1024,
            response_schema_id: response_schema_id.into(),
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.user_parts.push(UserPart::Text(text.into()));
        self
    }

    pub fn image(mut self, image: ImageRef) -> Self {
        self.user_parts.push(UserPart::Image(image));
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn first_image(&self) -> Option<&ImageRef> {
        self.user_parts.iter().find_map(|p| match p {
            UserPart::Image(i) => Some(i),
            UserPart::Text(_) => None,
        })
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.user_parts.iter().filter_map(|p| match p {
            UserPart::Text(t) => Some(t.as_str()),
            UserPart::Image(_) => None,
        })
    }

    /// All user text parts joined by blank lines.
    pub fn user_text(&self) -> String {
        self.texts().collect::<Vec<_>>().join("\n\n")
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.user_parts.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no user parts".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub backend: BackendKind,
    pub latency_ms: u64,
    /// 1-based attempt that produced this response.
    pub attempt: u32,
}

fn default_api_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_max_concurrent() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env_name: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent_requests: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub mock_fixture_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: None,
            api_key_env_name: default_api_key_env(),
            model_name: String::new(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            max_concurrent_requests: default_max_concurrent(),
            timeout_ms: default_timeout_ms(),
            mock_fixture_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn mock(fixture_dir: impl Into<PathBuf>) -> Self {
        Self {
            mock_fixture_dir: Some(fixture_dir.into()),
            ..Self::default()
        }
    }

    /// Fills an unset endpoint and model from `GEOVOCAB_API_URL` and
    /// `GEOVOCAB_MODEL`.
    pub fn with_env_defaults(mut self) -> Self {
        if self.endpoint_url.is_none() {
            self.endpoint_url = std::env::var(API_URL_ENV).ok().filter(|s| !s.is_empty());
        }
        if self.model_name.is_empty() {
            if let Ok(m) = std::env::var(MODEL_ENV) {
                self.model_name = m;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrent_requests == 0 {
            return Err(GatewayError::Config("max_concurrent_requests must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited; gave up after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("server error HTTP {status}; gave up after {attempts} attempts")]
    ServerError { status: u16, attempts: u32 },
    #[error("request timed out; gave up after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("request rejected with HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion payload: {0}")]
    MalformedPayload(String),
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("no mock fixture for key {key:?} (expected {path})")]
    FixtureMissing { key: String, path: String },
    #[error("reading mock fixture {path}: {source}")]
    FixtureIo {
        path: String,
        source: std::io::Error,
    },
}

impl GatewayError {
    /// Number of HTTP attempts made before giving up, for exhausted-retry errors.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            Self::RateLimited { attempts }
            | Self::ServerError { attempts, .. }
            | Self::Timeout { attempts } => Some(*attempts),
            _ => None,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::InvalidRequest(_))
    }
}

/// A chat model that can answer one request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// Backend selected from a [`GatewayConfig`]: the mock when a fixture
/// directory is configured, HTTP otherwise.
#[derive(Debug)]
pub enum Gateway {
    Http(HttpBackend),
    Mock(MockBackend),
}

impl Gateway {
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        match &config.mock_fixture_dir {
            Some(dir) => Ok(Self::Mock(MockBackend::new(dir)?)),
            None => Ok(Self::Http(HttpBackend::from_config(config)?)),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Self::Http(_) => BackendKind::Http,
            Self::Mock(_) => BackendKind::Mock,
        }
    }
}

impl ChatBackend for Gateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        match self {
            Self::Http(b) => b.complete(request),
            Self::Mock(b) => b.complete(request),
        }
    }
}

/// Convenience wrapper: builds the configured backend and sends one request.
pub fn complete(request: &ChatRequest, config: &GatewayConfig) -> Result<ChatResponse, GatewayError> {
    Gateway::from_config(config)?.complete(request)
}

/// Deterministic mock lookup key: `{schema_id}__{image hash}` when the request
/// carries an image, otherwise `{schema_id}__{first 12 hex chars of a digest
/// over the user text parts}`. The system prompt does not participate.
pub fn fixture_key(request: &ChatRequest) -> String {
    let suffix = match request.first_image() {
        Some(img) => img.content_hash.clone(),
        None => {
            let digest = sha256_hex_parts(request.texts().map(str::as_bytes));
            digest[..12].to_string()
        }
    };
    format!("{}__{}", request.response_schema_id, suffix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_key_uses_content_hash() {
        let mut img = ImageRef::from_bytes("x.png", vec![1, 2, 3], "image/png");
        img.content_hash = "deadbeef".into();
        let req = ChatRequest::new("decouple", "sys").text("describe").image(img);
        assert_eq!(fixture_key(&req), "decouple__deadbeef");
    }

    #[test]
    fn text_keys_are_deterministic_and_sensitive() {
        let a = ChatRequest::new("enhance", "sys").text("category: water");
        let b = ChatRequest::new("enhance", "other system prompt").text("category: water");
        let c = ChatRequest::new("enhance", "sys").text("category: wates");
        assert_eq!(fixture_key(&a), fixture_key(&b));
        assert_ne!(fixture_key(&a), fixture_key(&c));
        assert_eq!(fixture_key(&a).len(), "enhance__".len() + 12);
    }

    #[test]
    fn text_keys_collision_free_over_corpus() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..2000 {
            let req = ChatRequest::new("s", "").text(format!("prompt number {i}"));
            assert!(seen.insert(fixture_key(&req)));
        }
    }

    #[test]
    fn config_defaults() {
        let c: GatewayConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.max_retries, 3);
        assert_eq!(c.backoff_base_ms, 500);
        assert_eq!(c.max_concurrent_requests, 4);
        assert_eq!(c.timeout_ms, 60_000);
        assert_eq!(c.api_key_env_name, "GEOVOCAB_API_KEY");
        let bad = GatewayConfig {
            max_concurrent_requests: 0,
            ..GatewayConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn request_validation() {
        let req = ChatRequest::new("s", "sys");
        assert!(matches!(req.validate(), Err(GatewayError::InvalidRequest(_))));
        assert!(ChatRequest::new("s", "").text("x").temperature(-1.0).validate().is_err());
    }
}
