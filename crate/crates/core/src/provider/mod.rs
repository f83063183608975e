//! Generative and embedding backends.
//!
//! [`Provider`] is the single seam between the memory engine and any model
//! service. Two implementations ship with the crate:
//!
//! - [`HttpProvider`] speaks the OpenAI-compatible `/chat/completions` and
//!   `/embeddings` wire format.
//! - [`MockProvider`] is a pure function of its inputs. It answers
//!   extraction, summarization, answering and judging requests with fixed,
//!   inspectable rules so that every pipeline test can assert exact output.

mod http;
mod mock;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ProviderConfig, ProviderKind};

pub use http::HttpProvider;
pub use mock::{extract_pattern_triplets, MockProvider};

/// Errors surfaced by a [`Provider`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("input text is empty")]
    EmptyText,

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("request timed out")]
    Timeout,

    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
}

impl ProviderError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Timeout => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// What a chat request is for.
///
/// The HTTP provider ignores this and sends the rendered prompt text. The
/// mock provider routes on it, so mock behaviour does not depend on prompt
/// wording (templates are user-overridable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    General,
    ExtractTriplets {
        message: String,
    },
    Summarize {
        prior: Option<String>,
        user_text: String,
        assistant_text: String,
    },
    Answer {
        question: String,
        context: String,
    },
    Judge {
        question: String,
        answer: String,
        ground_truth: String,
    },
}

/// One request to a chat model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub max_output_tokens: u32,
    pub temperature: f32,
    pub task: Task,
}

impl ChatExchange {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>, task: Task) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            max_output_tokens: 256,
            temperature: 0.0,
            task,
        }
    }

    pub fn with_max_output_tokens(mut self, max_output_tokens: u32) -> Self {
        self.max_output_tokens = max_output_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.user_text.trim().is_empty() {
            return Err(ProviderError::EmptyText);
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_output_tokens must be at least 1".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Token accounting for one provider call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }
}

/// Successful chat response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

/// A dense vector with only finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::MalformedResponse(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = ProviderError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Chat and embedding capabilities used by the engine.
///
/// Implementations are shared across threads and must not keep mutable
/// state beyond a connection pool.
pub trait Provider: Send + Sync + fmt::Debug {
    fn kind(&self) -> ProviderKind;

    /// Dimension of every vector returned by [`Provider::embed`].
    fn dimension(&self) -> usize;

    fn chat_complete(&self, exchange: &ChatExchange) -> Result<Completion, ProviderError>;

    fn embed(&self, text: &str) -> Result<Embedding, ProviderError>;
}

/// Build the provider selected by `config.kind`.
pub fn from_config(config: &ProviderConfig) -> Result<Arc<dyn Provider>, ProviderError> {
    Ok(match config.kind {
        ProviderKind::Mock => Arc::new(MockProvider::new(config.embed_dim, config.mock_seed)),
        ProviderKind::Http => Arc::new(HttpProvider::from_config(config)?),
    })
}
