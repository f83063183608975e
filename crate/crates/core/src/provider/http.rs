//! OpenAI-compatible HTTP provider.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::Deserialize;
use serde_json::json;

use crate::config::{ProviderConfig, ProviderKind};

use super::{ChatExchange, Completion, Embedding, Provider, ProviderError, TokenUsage};

/// Client for `/chat/completions` and `/embeddings` endpoints.
///
/// Blocking; build it outside any async runtime and call it from blocking
/// threads.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    chat_model: String,
    embed_model: String,
    dimension: usize,
    max_retries: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpProvider {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = match &config.api_key_env {
            Some(var) if !var.is_empty() => Some(
                std::env::var(var).map_err(|_| ProviderError::MissingApiKey(var.clone()))?,
            ),
            _ => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key,
            chat_model: config.chat_model.clone(),
            embed_model: config.embed_model.clone(),
            dimension: config.embed_dim,
            max_retries: config.max_retries,
        })
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::warn!("{path}: {e}; retrying");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Result<String, ProviderError> {
        let url = format!("{}{}", self.base_url, path);
        let mut request = self.client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(text)
    }
}

fn classify(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else {
        ProviderError::Transport(e.to_string())
    }
}

/// Decode a chat-completions body into text and usage.
pub(crate) fn parse_chat_response(body: &str) -> Result<Completion, ProviderError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ProviderError::MalformedResponse("no choice content".into()))?;
    if text.trim().is_empty() {
        return Err(ProviderError::MalformedResponse("empty completion".into()));
    }
    let usage = parsed
        .usage
        .map(|u| TokenUsage::new(u.prompt_tokens, u.completion_tokens))
        .unwrap_or_default();
    Ok(Completion { text, usage })
}

/// Decode an embeddings body, checking the configured dimension.
pub(crate) fn parse_embedding_response(body: &str, dimension: usize) -> Result<Embedding, ProviderError> {
    let parsed: EmbeddingResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
    let values = parsed
        .data
        .into_iter()
        .next()
        .map(|d| d.embedding)
        .ok_or_else(|| ProviderError::MalformedResponse("no embedding data".into()))?;
    if values.len() != dimension {
        return Err(ProviderError::DimensionMismatch {
            expected: dimension,
            got: values.len(),
        });
    }
    Embedding::new(values)
}

impl Provider for HttpProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Http
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn chat_complete(&self, exchange: &ChatExchange) -> Result<Completion, ProviderError> {
        exchange.validate()?;
        let mut messages = Vec::new();
        if !exchange.system_text.trim().is_empty() {
            messages.push(json!({"role": "system", "content": exchange.system_text}));
        }
        messages.push(json!({"role": "user", "content": exchange.user_text}));
        let body = json!({
            "model": self.chat_model,
            "messages": messages,
            "max_tokens": exchange.max_output_tokens,
            "temperature": exchange.temperature,
        });
        parse_chat_response(&self.post("/chat/completions", &body)?)
    }

    fn embed(&self, text: &str) -> Result<Embedding, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let body = json!({"model": self.embed_model, "input": text});
        parse_embedding_response(&self.post("/embeddings", &body)?, self.dimension)
    }
}
