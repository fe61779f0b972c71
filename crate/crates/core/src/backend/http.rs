//! Chat-completions backend over HTTP.
//!
//! The API key is read from the environment variable named by
//! [`HttpConfig::api_key_env`] when the backend is built; it never appears in
//! configuration files.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::limit::{InFlightLimiter, TokenBucket};
use super::wire::{ChatMessage, ChatRequest, ChatResponse};
use super::{Backend, BackendError, BackendQuery, BackendResponse, QueryKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub top_logprobs: u32,
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    /// Retries after the first attempt for transport errors, 429 and 5xx.
    pub retries: u32,
    pub timeout_secs: f64,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub generation_max_tokens: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "LBAP_API_KEY".into(),
            top_logprobs: 5,
            max_in_flight: 4,
            requests_per_minute: 600,
            retries: 4,
            timeout_secs: 60.0,
            backoff_base_ms: 500,
            backoff_max_ms: 20_000,
            generation_max_tokens: 256,
        }
    }
}

impl HttpConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(BackendError::Config("endpoint and model must be set".into()));
        }
        if !(1..=20).contains(&self.top_logprobs) {
            return Err(BackendError::Config("top_logprobs must be in 1..=20".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    bucket: TokenBucket,
    in_flight: InFlightLimiter,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    /// Builds the client, reading the key from `cfg.api_key_env`. A missing
    /// variable is allowed for endpoints that need no key.
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; requests are sent without an API key", cfg.api_key_env);
        }
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            bucket: TokenBucket::per_minute(cfg.requests_per_minute),
            in_flight: InFlightLimiter::new(cfg.max_in_flight),
            cfg,
            api_key,
            client,
        })
    }

    fn request_body<'a>(&'a self, q: &'a BackendQuery) -> ChatRequest<'a> {
        let wants_logprobs = q.kind.needs_answer_tokens();
        let max_tokens = match q.kind {
            QueryKind::GenerateCandidates => self.cfg.generation_max_tokens,
            QueryKind::PromptSet => 32,
            _ => 4,
        };
        ChatRequest {
            model: &self.cfg.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &q.prompt,
            }],
            temperature: 0.0,
            max_tokens,
            logprobs: wants_logprobs.then_some(true),
            top_logprobs: wants_logprobs.then_some(self.cfg.top_logprobs),
        }
    }

    fn attempt(&self, q: &BackendQuery) -> Result<BackendResponse, Failure> {
        self.bucket.acquire();
        let _slot = self.in_flight.acquire();
        let mut req = self.client.post(&self.cfg.endpoint).json(&self.request_body(q));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Failure::Retry(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("status {status}: {}", truncate(&body, 200))));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| Failure::Fatal(format!("malformed response: {e}")))?;
        let response = parsed
            .into_backend(&q.answer_tokens)
            .ok_or_else(|| Failure::Fatal("response has no choices".into()))?;
        response.validated().map_err(|e| Failure::Fatal(e.to_string()))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Backend for HttpBackend {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(q) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(message)) => return Err(BackendError::Transport { message, attempts }),
                Err(Failure::Retry(message)) => {
                    if attempts > self.cfg.retries {
                        return Err(BackendError::Transport { message, attempts });
                    }
                    log::warn!("attempt {attempts} failed ({message}); retrying");
                    thread::sleep(self.cfg.backoff(attempts - 1));
                }
            }
        }
    }
}
