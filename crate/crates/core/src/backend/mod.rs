//! Text-generation backends: a completion-style HTTP client and two
//! deterministic local mocks.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serializer::{HeuristicCounter, SerializationConfig, TokenCounter};

pub use http::{HttpBackend, HttpRequest, HttpResponse, ReqwestTransport, Transport, TransportError};
pub use mock::{MockEchoBackend, MockKnnBackend, MockMode};
pub(crate) use mock::majority as majority_label;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("context overflow: prompt has {tokens} tokens, limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub stop_sequence: String,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, stop_sequence: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), stop_sequence: stop_sequence.into(), max_new_tokens: 32, temperature: 0.0 }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Continuation with the stop sequence (and anything after it) removed.
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    /// Status detail when `finish_reason` is `Error`.
    pub detail: Option<String>,
}

/// Cuts `text` at the first occurrence of `stop`. Returns whether it was found.
pub fn strip_stop(text: &mut String, stop: &str) -> bool {
    if stop.is_empty() {
        return false;
    }
    match text.find(stop) {
        Some(pos) => {
            text.truncate(pos);
            true
        }
        None => false,
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Exact token count when the backend can provide one, else the
    /// byte-length heuristic.
    fn count_tokens(&self, text: &str) -> usize {
        HeuristicCounter.count(text)
    }

    /// Upper bound on concurrent `generate` calls worth issuing.
    fn max_concurrency(&self) -> usize {
        1
    }

    /// Short name used in logs and result files.
    fn name(&self) -> String;
}

/// Adapts a backend's token counting to the serializer's counter interface.
pub struct BackendCounter<'a>(pub &'a dyn Backend);

impl TokenCounter for BackendCounter<'_> {
    fn count(&self, text: &str) -> usize {
        self.0.count_tokens(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    MockKnn,
    MockEcho,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 500 }
    }
}

impl RetryConfig {
    /// Delay before retry number `attempt` (1-based): base · 2^(attempt-1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    /// Optional endpoint returning exact token counts.
    pub tokenize_url: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    pub request_timeout_ms: u64,
    pub max_concurrent_requests: usize,
    pub retry: RetryConfig,
    pub extra_headers: BTreeMap<String, String>,
    pub context_limit: Option<usize>,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Reply of the `mock_echo` backend.
    pub echo_text: String,
    pub mock_mode: MockMode,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::MockKnn,
            endpoint_url: None,
            tokenize_url: None,
            model: "default".to_string(),
            auth_token_env: None,
            request_timeout_ms: 60_000,
            max_concurrent_requests: 4,
            retry: RetryConfig::default(),
            extra_headers: BTreeMap::new(),
            context_limit: None,
            max_new_tokens: 32,
            temperature: 0.0,
            echo_text: String::new(),
            mock_mode: MockMode::Auto,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Http && self.endpoint_url.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Config("http backend requires endpoint_url".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(BackendError::Config("max_concurrent_requests must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    /// Reads the bearer token named by `auth_token_env`, if any.
    pub fn auth_token(&self) -> Result<Option<String>, BackendError> {
        match &self.auth_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .ok()
                .filter(|v| !v.is_empty())
                .map(Some)
                .ok_or_else(|| BackendError::MissingCredential(var.clone())),
        }
    }
}

/// Builds the configured backend. Mocks parse prompts with `serialization`.
pub fn build_backend(
    config: &BackendConfig,
    serialization: &SerializationConfig,
) -> Result<Arc<dyn Backend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Arc::new(HttpBackend::new(config.clone(), ReqwestTransport::new()?)?),
        BackendKind::MockKnn => Arc::new(
            MockKnnBackend::new(serialization.clone(), config.mock_mode).with_context_limit(config.context_limit),
        ),
        BackendKind::MockEcho => {
            Arc::new(MockEchoBackend::new(config.echo_text.clone()).with_context_limit(config.context_limit))
        }
    })
}

pub(crate) fn check_context(backend: &dyn Backend, prompt: &str, limit: Option<usize>) -> Result<(), BackendError> {
    if let Some(limit) = limit {
        let tokens = backend.count_tokens(prompt);
        if tokens > limit {
            return Err(BackendError::ContextOverflow { tokens, limit });
        }
    }
    Ok(())
}
