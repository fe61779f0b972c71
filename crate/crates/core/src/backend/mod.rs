//! Language-model access.
//!
//! Every interaction is a [`BackendQuery`] answered by a [`BackendResponse`]
//! carrying the completion text and natural-log probabilities for the
//! requested answer tokens. Implementations:
//! - [`ReplayBackend`]: read-only lookup in a JSONL fixture table;
//! - [`RecordingBackend`]: serves cached entries, forwards misses and records them;
//! - [`SyntheticBackend`]: seeded stand-in LLM for experiments and tests;
//! - [`HttpBackend`]: chat-completions endpoint with retries and rate limits;
//! - [`RoutedBackend`]: dispatches by query kind.

mod http;
mod limit;
mod replay;
mod synthetic;
mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use limit::{InFlightGuard, InFlightLimiter, TokenBucket};
pub use replay::{RecordingBackend, ReplayBackend, ReplayEntry};
pub use synthetic::{SyntheticBackend, SyntheticProfile};

/// Floor for answer tokens missing from the returned top-k, `ln(1e-5)`.
pub const MISSING_TOKEN_LOGPROB: f64 = -11.512_925_464_970_229;

/// Logprobs within this margin above zero are rounding noise and clamp to 0.
const POSITIVE_LOGPROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("no replay entry for query {key}")]
    ReplayMiss { key: String },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("fixture file {path}: {message}")]
    Fixture { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    GenerateCandidates,
    #[serde(rename = "score_mcqa")]
    ScoreMcqa,
    WorldKnowledge,
    PromptSet,
    BinaryCertainty,
}

impl QueryKind {
    pub const ALL: [QueryKind; 5] = [
        QueryKind::GenerateCandidates,
        QueryKind::ScoreMcqa,
        QueryKind::WorldKnowledge,
        QueryKind::PromptSet,
        QueryKind::BinaryCertainty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::GenerateCandidates => "generate_candidates",
            QueryKind::ScoreMcqa => "score_mcqa",
            QueryKind::WorldKnowledge => "world_knowledge",
            QueryKind::PromptSet => "prompt_set",
            QueryKind::BinaryCertainty => "binary_certainty",
        }
    }

    /// Whether the caller reads token logprobs (as opposed to completion text).
    pub fn needs_answer_tokens(self) -> bool {
        matches!(
            self,
            QueryKind::ScoreMcqa | QueryKind::WorldKnowledge | QueryKind::BinaryCertainty
        )
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendQuery {
    pub kind: QueryKind,
    pub prompt: String,
    pub answer_tokens: Vec<String>,
}

impl BackendQuery {
    pub fn new(kind: QueryKind, prompt: impl Into<String>, answer_tokens: Vec<String>) -> Result<Self, BackendError> {
        if kind.needs_answer_tokens() && answer_tokens.is_empty() {
            return Err(BackendError::InvalidQuery(format!("{kind} query needs answer tokens")));
        }
        Ok(Self {
            kind,
            prompt: prompt.into(),
            answer_tokens,
        })
    }

    /// Stable fixture key: hex sha256 of the JSON encoding of
    /// `{kind, prompt, answer_tokens}` (fields in that order).
    pub fn key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("query serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub token_logprobs: BTreeMap<String, f64>,
}

impl BackendResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: BTreeMap::new(),
        }
    }

    /// Rejects NaN/positive logprobs; clamps tiny positive rounding noise to 0.
    pub fn validated(mut self) -> Result<Self, BackendError> {
        for (tok, lp) in self.token_logprobs.iter_mut() {
            if lp.is_nan() || *lp > POSITIVE_LOGPROB_TOLERANCE {
                return Err(BackendError::Transport {
                    message: format!("invalid logprob {lp} for token `{tok}`"),
                    attempts: 1,
                });
            }
            if *lp > 0.0 {
                *lp = 0.0;
            }
        }
        Ok(self)
    }

    /// Logprob of `token`, floored at [`MISSING_TOKEN_LOGPROB`] when absent.
    pub fn logprob_or_floor(&self, token: &str) -> f64 {
        self.token_logprobs
            .get(token)
            .copied()
            .map(|lp| lp.max(MISSING_TOKEN_LOGPROB))
            .unwrap_or(MISSING_TOKEN_LOGPROB)
    }
}

pub trait Backend: Send + Sync {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        (**self).query(q)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        (**self).query(q)
    }
}

/// Sends each query kind to its own backend, with a default for the rest.
pub struct RoutedBackend {
    default: Arc<dyn Backend>,
    routes: BTreeMap<QueryKind, Arc<dyn Backend>>,
}

impl RoutedBackend {
    pub fn new(default: Arc<dyn Backend>) -> Self {
        Self {
            default,
            routes: BTreeMap::new(),
        }
    }

    pub fn route(mut self, kind: QueryKind, backend: Arc<dyn Backend>) -> Self {
        self.routes.insert(kind, backend);
        self
    }
}

impl Backend for RoutedBackend {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        self.routes.get(&q.kind).unwrap_or(&self.default).query(q)
    }
}
