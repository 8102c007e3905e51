//! OpenAI-compatible chat-completions client with bounded retries.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use serde_json::{json, Value};

use super::{BackendKind, ChatBackend, ChatRequest, ChatResponse, GatewayConfig, GatewayError, UserPart};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(max: usize) -> Self {
        Self {
            max,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    Retryable(Retry),
    Fatal(GatewayError),
}

#[derive(Clone, Copy)]
enum Retry {
    RateLimited,
    Server(u16),
    Timeout,
}

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: String,
    model: String,
    max_retries: u32,
    backoff_base: Duration,
    limit: InFlightLimit,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("max_retries", &self.max_retries)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the endpoint from the config (or `GEOVOCAB_API_URL`) and the
    /// bearer token from the environment variable named in the config.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let config = config.clone().with_env_defaults();
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::Config("no endpoint configured for the HTTP backend".into()))?;
        let api_key = std::env::var(&config.api_key_env_name).map_err(|_| {
            GatewayError::Config(format!(
                "environment variable {} holding the API key is not set",
                config.api_key_env_name
            ))
        })?;
        Self::new(&endpoint, &api_key, &config)
    }

    pub fn new(endpoint: &str, api_key: &str, config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            agent: agent_config.into(),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key: api_key.to_string(),
            model: config.model_name.clone(),
            max_retries: config.max_retries,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            limit: InFlightLimit::new(config.max_concurrent_requests),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn backoff(&self, failed_attempt: u32) -> Duration {
        let exp = 2u32.saturating_pow(failed_attempt.saturating_sub(1).min(16));
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        self.backoff_base.mul_f64(f64::from(exp) * jitter)
    }

    fn send_once(&self, body: &Value) -> Result<String, Failure> {
        let _permit = self.limit.acquire();
        let result = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send_json(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(e) if is_timeout(&e) => return Err(Failure::Retryable(Retry::Timeout)),
            Err(e) => return Err(Failure::Fatal(GatewayError::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) if is_timeout(&e) => return Err(Failure::Retryable(Retry::Timeout)),
            Err(e) => return Err(Failure::Fatal(GatewayError::Transport(e.to_string()))),
        };
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(Failure::Fatal(GatewayError::Auth { status })),
            429 => Err(Failure::Retryable(Retry::RateLimited)),
            500..=599 => Err(Failure::Retryable(Retry::Server(status))),
            _ => Err(Failure::Fatal(GatewayError::HttpStatus {
                status,
                body: text.chars().take(500).collect(),
            })),
        }
    }
}

fn is_timeout(e: &ureq::Error) -> bool {
    match e {
        ureq::Error::Timeout(_) => true,
        ureq::Error::Io(io) => matches!(
            io.kind(),
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
        ),
        _ => false,
    }
}

/// Builds the chat-completions JSON body. Images travel as base64 data URLs;
/// an image without a payload is referenced by its uri.
pub(crate) fn request_body(model: &str, request: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if !request.system_prompt.is_empty() {
        messages.push(json!({
            "role": "system",
            "content": [{"type": "text", "text": request.system_prompt}],
        }));
    }
    let content: Vec<Value> = request
        .user_parts
        .iter()
        .map(|part| match part {
            UserPart::Text(t) => json!({"type": "text", "text": t}),
            UserPart::Image(img) => {
                let url = match &img.bytes {
                    Some(bytes) => format!(
                        "data:{};base64,{}",
                        img.mime,
                        base64::engine::general_purpose::STANDARD.encode(bytes)
                    ),
                    None => img.uri.clone(),
                };
                json!({"type": "image_url", "image_url": {"url": url}})
            }
        })
        .collect();
    messages.push(json!({"role": "user", "content": content}));
    json!({
        "model": model,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "messages": messages,
    })
}

/// Pulls the first choice's message content out of a completion payload.
pub(crate) fn completion_text(payload: &str) -> Result<String, GatewayError> {
    let v: Value =
        serde_json::from_str(payload).map_err(|e| GatewayError::MalformedPayload(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GatewayError::MalformedPayload("no choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(GatewayError::MalformedPayload(format!("unexpected content {other}"))),
    };
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyCompletion);
    }
    Ok(text)
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let body = request_body(&self.model, request);
        let started = Instant::now();
        let max_attempts = self.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&body) {
                Ok(payload) => {
                    let text = completion_text(&payload)?;
                    return Ok(ChatResponse {
                        text,
                        backend: BackendKind::Http,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt,
                    });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(kind)) if attempt >= max_attempts => {
                    return Err(match kind {
                        Retry::RateLimited => GatewayError::RateLimited { attempts: attempt },
                        Retry::Server(status) => GatewayError::ServerError {
                            status,
                            attempts: attempt,
                        },
                        Retry::Timeout => GatewayError::Timeout { attempts: attempt },
                    });
                }
                Err(Failure::Retryable(_)) => {
                    let wait = self.backoff(attempt);
                    log::warn!(
                        "{} {}: attempt {attempt} failed, retrying in {wait:?}",
                        request.response_schema_id,
                        self.url
                    );
                    std::thread::sleep(wait);
                }
            }
        }
    }
}
