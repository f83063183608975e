//! Engine configuration, loaded from TOML.
//!
//! Every key has a default, so an empty file is a valid configuration
//! (mock provider, files in the working directory).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    Mock,
}

impl std::fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Http => "http",
            Self::Mock => "mock",
        })
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "mock" => Ok(Self::Mock),
            other => Err(format!("unknown provider kind `{other}` (expected http or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout_ms: u64,
    pub mock_seed: u64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            chat_model: "gpt-4.1-mini".into(),
            embed_model: "text-embedding-ada-002".into(),
            embed_dim: 256,
            timeout_ms: 30_000,
            mock_seed: 0,
            max_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("kgmem.sqlite3"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub path: PathBuf,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("kgmem.index"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Number of triplets fetched by similarity before weighting.
    pub k: usize,
    /// Exponential decay rate. `0` disables decay (uniform weights).
    pub decay_rate: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            decay_rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    /// Overrides the built-in summarization prompt template.
    pub prompt_path: Option<PathBuf>,
    pub max_tokens: u32,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            prompt_path: None,
            max_tokens: 160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Overrides the built-in triplet-extraction prompt template.
    pub prompt_path: Option<PathBuf>,
    pub max_tokens: u32,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            prompt_path: None,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    /// Upper bound on whitespace tokens in a rendered memory context.
    pub max_tokens: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { max_tokens: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub provider: ProviderConfig,
    pub store: StoreConfig,
    pub index: IndexConfig,
    pub retrieval: RetrievalConfig,
    pub summary: SummaryConfig,
    pub extraction: ExtractionConfig,
    pub context: ContextConfig,
    pub service: ServiceConfig,
}

/// Smallest accepted `context.max_tokens`; the two section headers alone
/// take two tokens.
pub const MIN_CONTEXT_TOKENS: usize = 16;

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.retrieval.k == 0 {
            return invalid("retrieval.k must be at least 1".into());
        }
        if !self.retrieval.decay_rate.is_finite() || self.retrieval.decay_rate < 0.0 {
            return invalid(format!(
                "retrieval.decay_rate must be finite and >= 0, got {}",
                self.retrieval.decay_rate
            ));
        }
        if self.provider.embed_dim == 0 {
            return invalid("provider.embed_dim must be at least 1".into());
        }
        if self.provider.timeout_ms == 0 {
            return invalid("provider.timeout_ms must be at least 1".into());
        }
        if self.summary.max_tokens == 0 || self.extraction.max_tokens == 0 {
            return invalid("summary/extraction max_tokens must be at least 1".into());
        }
        if self.context.max_tokens < MIN_CONTEXT_TOKENS {
            return invalid(format!(
                "context.max_tokens must be at least {MIN_CONTEXT_TOKENS}"
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c.retrieval.k, 20);
        assert_eq!(c.retrieval.decay_rate, 0.02);
        assert_eq!(c.context.max_tokens, 400);
        assert_eq!(c.provider.embed_dim, 256);
        assert_eq!(c.provider.kind, ProviderKind::Mock);
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = Config::from_toml_str(
            "[provider]\nkind = \"http\"\nbase_url = \"http://localhost:1234/v1\"\n\
             [retrieval]\nk = 5\ndecay_rate = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.provider.kind, ProviderKind::Http);
        assert_eq!(c.retrieval.k, 5);
        let again = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("[retrieval]\nk = 0\n").is_err());
        assert!(Config::from_toml_str("[retrieval]\ndecay_rate = -1.0\n").is_err());
        assert!(Config::from_toml_str("[context]\nmax_tokens = 3\n").is_err());
        assert!(Config::from_toml_str("[nope]\nx = 1\n").is_err());
    }
}
