//! HTTP backend.
//!
//! Two wire protocols are supported:
//!
//! * `candidates` — POST `{"model", "prompt", "candidates": [...]}` and
//!   receive `{"log_probs": [...]}` aligned with the candidates. A server
//!   that cannot score a candidate as one token answers
//!   `{"error": {"type": "multi_token", "token": "<candidate>"}}`.
//! * `openai-echo` — an OpenAI-compatible `/v1/completions` endpoint. Each
//!   candidate is appended to the prompt (after a space) and scored with
//!   `echo: true, max_tokens: 0, logprobs: 0`; the continuation must be a
//!   single token.
//!
//! Transient failures (transport errors, HTTP 429 and 5xx) are retried with
//! exponential backoff.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError};

pub const ENV_BACKEND_URL: &str = "ORDERSMITH_BACKEND_URL";
pub const ENV_API_KEY: &str = "ORDERSMITH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HttpProtocol {
    #[default]
    Candidates,
    OpenaiEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub protocol: HttpProtocol,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            model: String::new(),
            protocol: HttpProtocol::Candidates,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

impl HttpConfig {
    /// Overrides url and key from `ORDERSMITH_BACKEND_URL` / `ORDERSMITH_API_KEY`.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_BACKEND_URL) {
            if !url.is_empty() {
                self.url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("permit lock poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock poisoned") += 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    Transient(String),
    Fatal(BackendError),
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.url.is_empty() {
            return Err(BackendError::BadConfig(format!(
                "backend url is empty (set it in the config or via {ENV_BACKEND_URL})"
            )));
        }
        if config.max_in_flight == 0 {
            return Err(BackendError::BadConfig("max_in_flight must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::BadConfig(e.to_string()))?;
        let permits = Permits {
            available: Mutex::new(config.max_in_flight),
            freed: Condvar::new(),
        };
        Ok(Self {
            config,
            client,
            permits,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post_once(&self, body: &Value) -> Result<Value, Failure> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(BackendError::ProtocolError(format!(
                "HTTP {status}, body is not JSON: {e}"
            )))
        })?;
        if let Some(err) = value.get("error").filter(|e| !e.is_null()) {
            if err.get("type").and_then(Value::as_str) == Some("multi_token") {
                let token = err
                    .get("token")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string();
                return Err(Failure::Fatal(BackendError::TokenizationError(token)));
            }
            return Err(Failure::Fatal(BackendError::ProtocolError(format!(
                "HTTP {status}: {err}"
            ))));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::ProtocolError(format!(
                "HTTP {status}: {text}"
            ))));
        }
        Ok(value)
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.permits.acquire();
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("retrying backend request in {delay} ms after: {last}");
                thread::sleep(Duration::from_millis(delay));
            }
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => last = msg,
            }
        }
        Err(BackendError::BackendUnavailable {
            attempts,
            message: last,
        })
    }

    fn score_candidates(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "candidates": candidates,
        });
        let value = self.post(&body)?;
        let log_probs: Vec<f64> = value
            .get("log_probs")
            .cloned()
            .ok_or_else(|| BackendError::ProtocolError("missing \"log_probs\"".into()))
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| BackendError::ProtocolError(format!("log_probs: {e}")))
            })?;
        check_log_probs(&log_probs, candidates.len())?;
        Ok(log_probs)
    }

    fn score_echo(&self, prompt: &str, candidate: &str) -> Result<f64, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt} {candidate}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0,
        });
        let value = self.post(&body)?;
        let logprobs = value
            .pointer("/choices/0/logprobs")
            .ok_or_else(|| BackendError::ProtocolError("missing choices[0].logprobs".into()))?;
        let parsed: EchoLogprobs = serde_json::from_value(logprobs.clone())
            .map_err(|e| BackendError::ProtocolError(format!("logprobs: {e}")))?;
        if parsed.token_logprobs.len() != parsed.text_offset.len() {
            return Err(BackendError::ProtocolError(
                "token_logprobs and text_offset lengths differ".into(),
            ));
        }
        let boundary = prompt.chars().count();
        let continuation: Vec<Option<f64>> = parsed
            .text_offset
            .iter()
            .zip(&parsed.token_logprobs)
            .filter(|(&off, _)| off >= boundary)
            .map(|(_, lp)| *lp)
            .collect();
        match continuation.as_slice() {
            [Some(lp)] => Ok(*lp),
            [None] => Err(BackendError::ProtocolError("null log-prob for candidate".into())),
            _ => Err(BackendError::TokenizationError(candidate.to_string())),
        }
    }
}

#[derive(Deserialize)]
struct EchoLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

fn check_log_probs(log_probs: &[f64], expected: usize) -> Result<(), BackendError> {
    if log_probs.len() != expected {
        return Err(BackendError::ProtocolError(format!(
            "expected {expected} log-probs, got {}",
            log_probs.len()
        )));
    }
    if let Some(v) = log_probs.iter().find(|v| !v.is_finite() || **v > 1e-9) {
        return Err(BackendError::ProtocolError(format!("invalid log-prob {v}")));
    }
    Ok(())
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        format!(
            "http:{:?}:{}:{}",
            self.config.protocol, self.config.url, self.config.model
        )
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        match self.config.protocol {
            HttpProtocol::Candidates => self.score_candidates(prompt, candidates),
            HttpProtocol::OpenaiEcho => {
                let log_probs = candidates
                    .iter()
                    .map(|c| self.score_echo(prompt, c))
                    .collect::<Result<Vec<_>, _>>()?;
                check_log_probs(&log_probs, candidates.len())?;
                Ok(log_probs)
            }
        }
    }
}
