//! Chat-completions request and response bodies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BackendResponse;

#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: Vec<ChatMessage<'a>>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatMessage<'a> {
    pub role: &'static str,
    pub content: &'a str,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ChatResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct Choice {
    pub message: Message,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct Message {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Vec<TokenLogprob>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct TokenLogprob {
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

impl ChatResponse {
    /// First choice as a [`BackendResponse`]. Logprobs come from the first
    /// generated position; tokens match answers after trimming whitespace,
    /// keeping the largest logprob when several variants map to one answer.
    pub fn into_backend(self, answer_tokens: &[String]) -> Option<BackendResponse> {
        let choice = self.choices.into_iter().next()?;
        let mut token_logprobs = BTreeMap::new();
        if let Some(first) = choice.logprobs.and_then(|l| l.content.into_iter().next()) {
            for top in first.top_logprobs {
                let tok = top.token.trim();
                if answer_tokens.iter().any(|a| a == tok) {
                    let e = token_logprobs.entry(tok.to_string()).or_insert(f64::NEG_INFINITY);
                    *e = f64::max(*e, top.logprob);
                }
            }
        }
        Some(BackendResponse {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs,
        })
    }
}
