//! The memory engine: a two-call lifecycle around the host application's
//! own answer generation.
//!
//! 1. [`MemoryEngine::retrieve_context`] before generating a reply: classify
//!    the turn, fetch the session summary and the user's most similar
//!    triplets, weight them by recency and render them as prompt text.
//! 2. [`MemoryEngine::record_turn`] after the reply: log both messages,
//!    extract and store triplets from the user message, and fold the turn
//!    into the session summary.
//!
//! | user history | session summary | scenario                     |
//! |--------------|-----------------|------------------------------|
//! | no           | no              | `new_user_new_session`       |
//! | yes          | no              | `repeat_user_new_session`    |
//! | yes          | yes             | `repeat_user_ongoing_session`|
//! | no           | yes             | store corruption (error)     |

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};
use crate::decay::{self, DecayError, Weighted};
use crate::graph::{GraphError, KnowledgeGraph, PersonaGraph, StoredTriplet, DEFAULT_EXTRACTION_TEMPLATE};
use crate::ids::{MessageId, TripletId};
use crate::index::{EmbeddingIndex, IndexError, ScoredEntry};
use crate::provider::{self, Provider, ProviderError, TokenUsage};
use crate::store::{MessageRecord, Role, Store, StoreError, SummaryRecord, UsageRecord, WarningRecord};
use crate::summarizer::{Summarizer, SummaryUpdate, DEFAULT_SUMMARY_TEMPLATE};
use crate::template::PromptTemplate;
use crate::time::{self, Timestamp};
use crate::tokens::{count_tokens, last_tokens};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid request: {0}")]
    Validation(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Index(#[from] IndexError),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error(transparent)]
    Decay(#[from] DecayError),

    #[error("store corruption: session {session_id} has a summary but user {user_name} has no history")]
    Corruption { user_name: String, session_id: String },

    #[error("reading prompt template: {0}")]
    Template(std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NewUserNewSession,
    RepeatUserNewSession,
    RepeatUserOngoingSession,
}

impl Scenario {
    /// Classify from (user has history, session has summary).
    pub fn classify(has_history: bool, has_summary: bool) -> Option<Self> {
        match (has_history, has_summary) {
            (false, false) => Some(Scenario::NewUserNewSession),
            (true, false) => Some(Scenario::RepeatUserNewSession),
            (true, true) => Some(Scenario::RepeatUserOngoingSession),
            (false, true) => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Scenario::NewUserNewSession => 1,
            Scenario::RepeatUserNewSession => 2,
            Scenario::RepeatUserOngoingSession => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub user_name: String,
    pub session_id: String,
    pub user_text: String,
    #[serde(default = "time::now")]
    pub timestamp: Timestamp,
}

impl TurnRequest {
    pub fn new(
        user_name: impl Into<String>,
        session_id: impl Into<String>,
        user_text: impl Into<String>,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            user_name: user_name.into(),
            session_id: session_id.into(),
            user_text: user_text.into(),
            timestamp: time::truncate_millis(timestamp),
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        for (name, value) in [
            ("user_name", &self.user_name),
            ("session_id", &self.session_id),
            ("user_text", &self.user_text),
        ] {
            if value.trim().is_empty() {
                return Err(EngineError::Validation(format!("{name} must not be empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTriplet {
    pub triplet: StoredTriplet,
    pub similarity: f64,
    pub normalized_age: f64,
    pub raw_weight: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryContext {
    pub scenario: Scenario,
    pub session_summary: Option<String>,
    /// In similarity order.
    pub weighted_triplets: Vec<WeightedTriplet>,
    pub rendered_context: String,
    pub context_token_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extraction,
    Summary,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Extraction => "extraction",
            Stage::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

/// What [`MemoryEngine::record_turn`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReceipt {
    /// User message id, then assistant message id.
    pub message_ids: Vec<MessageId>,
    pub triplet_ids: Vec<TripletId>,
    /// The session summary after this turn (stale if the summary stage failed).
    pub summary: Option<String>,
    pub turns_covered: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<StageFailure>,
}

pub const SUMMARY_HEADER: &str = "[SESSION SUMMARY]";
pub const KNOWLEDGE_HEADER: &str = "[USER KNOWLEDGE]";

/// Render the context block handed to the host application:
///
/// ```text
/// [SESSION SUMMARY]
/// <summary or "none">
/// [USER KNOWLEDGE]
/// (subject, predicate, object) [weight=0.xxxx]
/// ```
///
/// Every line, including the last, ends in `\n`.
pub fn render_context(summary: Option<&str>, triplets: &[WeightedTriplet]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    out.push_str(summary.unwrap_or("none"));
    out.push('\n');
    out.push_str(KNOWLEDGE_HEADER);
    out.push('\n');
    for w in triplets {
        let t = &w.triplet.triplet;
        out.push_str(&format!(
            "({}, {}, {}) [weight={:.4}]\n",
            t.subject, t.predicate, t.object, w.weight
        ));
    }
    out
}

pub struct MemoryEngine {
    config: Config,
    store: Arc<Store>,
    index: Arc<EmbeddingIndex>,
    provider: Arc<dyn Provider>,
    graph: KnowledgeGraph,
    summarizer: Summarizer,
    user_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for MemoryEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryEngine")
            .field("provider", &self.provider)
            .field("index", &self.index)
            .finish_non_exhaustive()
    }
}

impl MemoryEngine {
    /// Open the configured store, index and provider.
    pub fn open(config: Config) -> Result<Self, EngineError> {
        let provider = provider::from_config(&config.provider)?;
        Self::open_with_provider(config, provider)
    }

    pub fn open_with_provider(config: Config, provider: Arc<dyn Provider>) -> Result<Self, EngineError> {
        let store = Arc::new(Store::open(&config.store.path)?);
        let index = Arc::new(EmbeddingIndex::open(&config.index.path, config.provider.embed_dim)?);
        Self::from_parts(config, store, index, provider)
    }

    /// A throwaway engine backed by an in-memory store and index.
    pub fn in_memory(config: Config, provider: Arc<dyn Provider>) -> Result<Self, EngineError> {
        let store = Arc::new(Store::open_in_memory()?);
        let index = Arc::new(EmbeddingIndex::in_memory(config.provider.embed_dim));
        Self::from_parts(config, store, index, provider)
    }

    pub fn from_parts(
        config: Config,
        store: Arc<Store>,
        index: Arc<EmbeddingIndex>,
        provider: Arc<dyn Provider>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if provider.dimension() != index.dimension() {
            return Err(EngineError::Index(IndexError::DimensionMismatch {
                expected: index.dimension(),
                got: provider.dimension(),
            }));
        }
        let extraction = PromptTemplate::load_or(
            config.extraction.prompt_path.as_deref(),
            DEFAULT_EXTRACTION_TEMPLATE,
        )
        .map_err(EngineError::Template)?;
        let summary = PromptTemplate::load_or(config.summary.prompt_path.as_deref(), DEFAULT_SUMMARY_TEMPLATE)
            .map_err(EngineError::Template)?;
        Ok(Self {
            graph: KnowledgeGraph::new(store.clone(), index.clone(), extraction, config.extraction.max_tokens),
            summarizer: Summarizer::new(summary, config.summary.max_tokens),
            config,
            store,
            index,
            provider,
            user_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn index(&self) -> &Arc<EmbeddingIndex> {
        &self.index
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.provider
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn get_summary(&self, session_id: &str) -> Result<Option<SummaryRecord>, EngineError> {
        Ok(self.store.get_summary(session_id)?)
    }

    pub fn get_persona(&self, user_name: &str) -> Result<PersonaGraph, EngineError> {
        Ok(self.graph.get_persona(user_name)?)
    }

    pub fn has_user_history(&self, user_name: &str) -> Result<bool, EngineError> {
        Ok(self.store.has_user_history(user_name)?)
    }

    fn user_lock(&self, user_name: &str) -> Arc<Mutex<()>> {
        let mut locks = self.user_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(user_name.to_string()).or_default().clone()
    }

    /// Build the memory context for a turn. Never writes.
    pub fn retrieve_context(&self, request: &TurnRequest) -> Result<MemoryContext, EngineError> {
        request.validate()?;
        let has_history = self.store.has_user_history(&request.user_name)?;
        let summary = self.store.get_summary(&request.session_id)?;
        let scenario = Scenario::classify(has_history, summary.is_some()).ok_or_else(|| {
            EngineError::Corruption {
                user_name: request.user_name.clone(),
                session_id: request.session_id.clone(),
            }
        })?;
        if scenario == Scenario::NewUserNewSession {
            return Ok(MemoryContext {
                scenario,
                session_summary: None,
                weighted_triplets: Vec::new(),
                rendered_context: String::new(),
                context_token_count: 0,
                warnings: Vec::new(),
            });
        }

        let mut warnings = Vec::new();
        let hits = match self.provider.embed(&request.user_text) {
            Ok(query) => self
                .index
                .query_top_k(&query, &request.user_name, self.config.retrieval.k)?,
            Err(e) => {
                log::warn!("query embedding failed, using summary only: {e}");
                warnings.push(format!("query embedding failed, triplets omitted: {e}"));
                Vec::new()
            }
        };
        let mut batch = Vec::with_capacity(hits.len());
        for hit in hits {
            match self.store.get_triplet(&crate::ids::TripletId(hit.entry.payload.clone()))? {
                Some(row) => batch.push((hit, row)),
                None => warnings.push(format!(
                    "index entry {} has no triplet row; skipped",
                    hit.entry.entry_id
                )),
            }
        }

        let mut triplets = self.weigh(batch, request.timestamp)?;
        let mut summary_text = summary.map(|s| s.summary_text);
        let budget = self.config.context.max_tokens;
        let mut rendered = render_context(summary_text.as_deref(), &triplets);

        if count_tokens(&rendered) > budget && !triplets.is_empty() {
            // Drop lowest-weight triplets (later ones first on ties), then
            // re-weight the survivors so the batch still sums to one.
            let mut keep = triplets.clone();
            while count_tokens(&render_context(summary_text.as_deref(), &keep)) > budget && !keep.is_empty() {
                let victim = keep
                    .iter()
                    .enumerate()
                    .min_by(|(i, a), (j, b)| a.weight.total_cmp(&b.weight).then(j.cmp(i)))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                keep.remove(victim);
            }
            let survivors = keep
                .into_iter()
                .map(|w| {
                    (
                        ScoredLite {
                            similarity: w.similarity,
                        },
                        w.triplet,
                    )
                })
                .collect();
            triplets = self.weigh_lite(survivors, request.timestamp)?;
            rendered = render_context(summary_text.as_deref(), &triplets);
        }
        if count_tokens(&rendered) > budget {
            let fixed = count_tokens(&render_context(Some(""), &triplets));
            let room = budget.saturating_sub(fixed).max(1);
            let trimmed = last_tokens(summary_text.as_deref().unwrap_or("none"), room);
            warnings.push("session summary truncated to fit the context budget".into());
            summary_text = Some(trimmed);
            rendered = render_context(summary_text.as_deref(), &triplets);
        }

        Ok(MemoryContext {
            scenario,
            session_summary: summary_text,
            context_token_count: count_tokens(&rendered),
            weighted_triplets: triplets,
            rendered_context: rendered,
            warnings,
        })
    }

    fn weigh(
        &self,
        batch: Vec<(ScoredEntry, StoredTriplet)>,
        now: Timestamp,
    ) -> Result<Vec<WeightedTriplet>, EngineError> {
        let lite = batch
            .into_iter()
            .map(|(hit, row)| {
                (
                    ScoredLite {
                        similarity: hit.similarity,
                    },
                    row,
                )
            })
            .collect();
        self.weigh_lite(lite, now)
    }

    fn weigh_lite(
        &self,
        batch: Vec<(ScoredLite, StoredTriplet)>,
        now: Timestamp,
    ) -> Result<Vec<WeightedTriplet>, EngineError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        // Weights depend only on differences between creation times, so a
        // request stamped before its newest triplet is moved up to it.
        let newest = batch.iter().map(|(_, t)| t.created_at).max().expect("non-empty");
        let now = now.max(newest);
        let items: Vec<((ScoredLite, StoredTriplet), Timestamp)> = batch
            .into_iter()
            .map(|(s, t)| {
                let at = t.created_at;
                ((s, t), at)
            })
            .collect();
        let rate = self.config.retrieval.decay_rate;
        let weighted = if rate == 0.0 {
            decay::weigh_uniform(items, now)?
        } else {
            decay::weigh(items, now, rate)?
        };
        Ok(weighted
            .into_iter()
            .map(|w: Weighted<(ScoredLite, StoredTriplet)>| WeightedTriplet {
                similarity: w.item.0.similarity,
                triplet: w.item.1,
                normalized_age: w.normalized_age,
                raw_weight: w.raw_weight,
                weight: w.weight,
            })
            .collect())
    }

    /// Persist a completed turn.
    ///
    /// Message logging must succeed or the call fails. Triplet extraction
    /// and the summary update are independent stages: their failures are
    /// reported in [`TurnReceipt::failures`] and recorded as warnings, and
    /// never undo the logged messages.
    pub fn record_turn(&self, request: &TurnRequest, assistant_text: &str) -> Result<TurnReceipt, EngineError> {
        request.validate()?;
        if assistant_text.trim().is_empty() {
            return Err(EngineError::Validation("assistant_text must not be empty".into()));
        }
        let lock = self.user_lock(&request.user_name);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let at = time::truncate_millis(request.timestamp);
        let user = &request.user_name;
        let session = &request.session_id;

        let seq = self.store.count_session_messages(user, session)?;
        let messages = [
            (Role::User, request.user_text.as_str(), seq),
            (Role::Assistant, assistant_text, seq + 1),
        ]
        .map(|(role, content, seq)| MessageRecord {
            message_id: MessageId::derive(user, session, seq),
            user_name: user.clone(),
            session_id: session.clone(),
            role,
            content: content.to_string(),
            created_at: at,
            usage: None,
        });
        self.store.append_messages(&messages)?;
        let mut receipt = TurnReceipt {
            message_ids: messages.iter().map(|m| m.message_id.clone()).collect(),
            triplet_ids: Vec::new(),
            summary: None,
            turns_covered: 0,
            failures: Vec::new(),
        };

        // Only the user's text feeds the knowledge graph.
        match self.extract_and_store(request, &messages[0].message_id, at) {
            Ok(ids) => receipt.triplet_ids = ids,
            Err(e) => {
                if let GraphError::Partial { stored, .. } = &e {
                    receipt.triplet_ids = stored.clone();
                }
                self.fail_stage(&mut receipt, request, Stage::Extraction, &e.to_string(), at);
            }
        }

        let prior = self.store.get_summary(session)?;
        let update = SummaryUpdate {
            prior_summary: prior.as_ref().map(|p| p.summary_text.clone()),
            user_text: request.user_text.clone(),
            assistant_text: assistant_text.to_string(),
        };
        let turns_before = prior.as_ref().map_or(0, |p| p.turns_covered);
        let outcome = self
            .summarizer
            .update_summary(self.provider.as_ref(), &update)
            .map_err(EngineError::from)
            .and_then(|(text, usage)| {
                if text.is_empty() {
                    return Err(EngineError::Provider(ProviderError::MalformedResponse(
                        "empty summary".into(),
                    )));
                }
                self.record_usage(request, Some(&messages[1].message_id), "summary", usage, at)?;
                let record = SummaryRecord {
                    session_id: session.clone(),
                    user_name: user.clone(),
                    summary_text: text,
                    updated_at: at,
                    turns_covered: turns_before + 1,
                };
                self.store.upsert_summary(&record)?;
                Ok(record)
            });
        match outcome {
            Ok(record) => {
                receipt.summary = Some(record.summary_text);
                receipt.turns_covered = record.turns_covered;
            }
            Err(e) => {
                receipt.summary = prior.map(|p| p.summary_text);
                receipt.turns_covered = turns_before;
                self.fail_stage(&mut receipt, request, Stage::Summary, &e.to_string(), at);
            }
        }
        Ok(receipt)
    }

    fn extract_and_store(
        &self,
        request: &TurnRequest,
        user_message_id: &MessageId,
        at: Timestamp,
    ) -> Result<Vec<TripletId>, GraphError> {
        let provider = self.provider.as_ref();
        let (triplets, usage) = self.graph.extract_triplets(provider, &request.user_text)?;
        self.record_usage(request, Some(user_message_id), "extraction", usage, at)
            .map_err(|e| match e {
                EngineError::Store(s) => GraphError::Store(s),
                other => GraphError::InvalidTriplet(other.to_string()),
            })?;
        self.graph.store_triplets(
            provider,
            &triplets,
            &request.user_name,
            &request.session_id,
            &request.user_text,
            at,
        )
    }

    fn record_usage(
        &self,
        request: &TurnRequest,
        message_id: Option<&MessageId>,
        purpose: &str,
        usage: TokenUsage,
        at: Timestamp,
    ) -> Result<(), EngineError> {
        self.store.record_usage(&UsageRecord {
            message_id: message_id.cloned(),
            user_name: request.user_name.clone(),
            session_id: request.session_id.clone(),
            purpose: purpose.to_string(),
            usage,
            created_at: at,
        })?;
        Ok(())
    }

    fn fail_stage(&self, receipt: &mut TurnReceipt, request: &TurnRequest, stage: Stage, error: &str, at: Timestamp) {
        log::warn!("{} stage failed for {}/{}: {error}", stage.as_str(), request.user_name, request.session_id);
        let warning = WarningRecord {
            user_name: request.user_name.clone(),
            session_id: request.session_id.clone(),
            stage: stage.as_str().to_string(),
            detail: error.to_string(),
            created_at: at,
        };
        if let Err(e) = self.store.record_warning(&warning) {
            log::error!("could not record warning: {e}");
        }
        receipt.failures.push(StageFailure {
            stage,
            error: error.to_string(),
        });
    }
}

#[derive(Debug, Clone, Copy)]
struct ScoredLite {
    similarity: f64,
}
