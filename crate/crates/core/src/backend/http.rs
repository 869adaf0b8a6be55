use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tracing::warn;

use super::{
    check_context, strip_stop, Backend, BackendConfig, BackendError, FinishReason, GenerationRequest,
    GenerationResult,
};
use crate::serializer::{HeuristicCounter, TokenCounter};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// Sends one JSON POST. Swappable so tests can observe traffic.
pub trait Transport: Send + Sync {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = self
            .client
            .post(&request.url)
            .timeout(request.timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.body.clone());
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        let resp = builder.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpResponse { status, body })
    }
}

fn classify(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Other(e.to_string())
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter lock poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("limiter lock poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Completion-style client: raw prompt in, continuation out.
pub struct HttpBackend<T: Transport = ReqwestTransport> {
    config: BackendConfig,
    transport: T,
    headers: Vec<(String, String)>,
    limiter: Limiter,
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl<T: Transport> HttpBackend<T> {
    pub fn new(config: BackendConfig, transport: T) -> Result<Self, BackendError> {
        config.validate()?;
        let mut headers: Vec<(String, String)> =
            config.extra_headers.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        if let Some(token) = config.auth_token()? {
            headers.push(("Authorization".to_string(), format!("Bearer {token}")));
        }
        let limiter = Limiter::new(config.max_concurrent_requests);
        Ok(Self { config, transport, headers, limiter })
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn request(&self, url: &str, body: &Value) -> HttpRequest {
        HttpRequest {
            url: url.to_string(),
            headers: self.headers.clone(),
            body: body.to_string(),
            timeout: Duration::from_millis(self.config.request_timeout_ms),
        }
    }

    /// Posts with retries on transport failures and retryable statuses.
    /// The final non-2xx response is returned rather than raised.
    fn post_with_retry(&self, req: &HttpRequest) -> Result<HttpResponse, BackendError> {
        let attempts = self.config.retry.max_attempts;
        let mut attempt = 1;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post(req)
            };
            let last = attempt >= attempts;
            match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp),
                Ok(resp) if !retryable(resp.status) || last => return Ok(resp),
                Ok(resp) => warn!(status = resp.status, attempt, "retrying completion request"),
                Err(TransportError::Timeout) if last => return Err(BackendError::Timeout),
                Err(TransportError::Other(e)) if last => return Err(BackendError::Transport(e)),
                Err(e) => warn!(error = ?e, attempt, "retrying completion request"),
            }
            std::thread::sleep(self.config.retry.backoff(attempt));
            attempt += 1;
        }
    }
}

fn parse_completion(body: &str) -> Option<(String, Option<String>)> {
    let v: Value = serde_json::from_str(body).ok()?;
    if let Some(choice) = v.get("choices").and_then(|c| c.get(0)) {
        let text = choice.get("text").and_then(Value::as_str)?.to_string();
        let reason = choice.get("finish_reason").and_then(Value::as_str).map(str::to_string);
        return Some((text, reason));
    }
    // llama.cpp-style servers answer with a bare "content" field
    let text = v.get("content").and_then(Value::as_str)?.to_string();
    Some((text, v.get("stop_type").and_then(Value::as_str).map(str::to_string)))
}

impl<T: Transport> Backend for HttpBackend<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        check_context(self, &request.prompt, self.config.context_limit)?;
        let body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "stop": [request.stop_sequence],
            "temperature": request.temperature,
        });
        let url = self.config.endpoint_url.as_deref().expect("validated in new");
        let started = Instant::now();
        let resp = self.post_with_retry(&self.request(url, &body))?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if !(200..300).contains(&resp.status) {
            let snippet: String = resp.body.chars().take(200).collect();
            return Ok(GenerationResult {
                text: String::new(),
                finish_reason: FinishReason::Error,
                latency_ms,
                detail: Some(format!("HTTP {}: {snippet}", resp.status)),
            });
        }
        let Some((mut text, reason)) = parse_completion(&resp.body) else {
            return Ok(GenerationResult {
                text: String::new(),
                finish_reason: FinishReason::Error,
                latency_ms,
                detail: Some("unrecognized completion response".to_string()),
            });
        };
        let stopped = strip_stop(&mut text, &request.stop_sequence);
        let finish_reason = match reason.as_deref() {
            _ if stopped => FinishReason::Stop,
            Some("length" | "limit") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(GenerationResult { text, finish_reason, latency_ms, detail: None })
    }

    fn count_tokens(&self, text: &str) -> usize {
        let Some(url) = self.config.tokenize_url.as_deref() else {
            return HeuristicCounter.count(text);
        };
        let body = json!({ "model": self.config.model, "prompt": text });
        let outcome = {
            let _permit = self.limiter.acquire();
            self.transport.post(&self.request(url, &body))
        };
        let counted = outcome.ok().filter(|r| (200..300).contains(&r.status)).and_then(|r| {
            let v: Value = serde_json::from_str(&r.body).ok()?;
            v.get("count")
                .and_then(Value::as_u64)
                .map(|c| c as usize)
                .or_else(|| v.get("tokens").and_then(Value::as_array).map(Vec::len))
        });
        counted.unwrap_or_else(|| {
            warn!("tokenize endpoint unavailable, using heuristic count");
            HeuristicCounter.count(text)
        })
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrent_requests
    }

    fn name(&self) -> String {
        format!("http:{}", self.config.model)
    }
}
