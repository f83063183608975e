//! Long-term conversational memory: rolling session summaries plus a
//! per-user knowledge graph of triplets, retrieved by embedding similarity
//! and weighted by recency.
//!
//! The host application calls [`MemoryEngine::retrieve_context`] before
//! generating a reply and [`MemoryEngine::record_turn`] after it.

pub mod config;
pub mod decay;
pub mod engine;
pub mod eval;
pub mod graph;
pub mod ids;
pub mod index;
pub mod provider;
pub mod store;
pub mod summarizer;
pub mod template;
pub mod time;
pub mod tokens;

pub use config::{Config, ConfigError, ProviderKind};
pub use decay::{weigh, weigh_uniform, DecayError, Weighted};
pub use engine::{
    render_context, EngineError, MemoryContext, MemoryEngine, Scenario, Stage, StageFailure, TurnReceipt,
    TurnRequest, WeightedTriplet,
};
pub use eval::{Category, Dataset, EvalOptions, EvalReport, Evaluator, Mode};
pub use graph::{KnowledgeGraph, PersonaGraph, StoredTriplet, Triplet};
pub use ids::{MessageId, TripletId};
pub use index::{EmbeddingIndex, IndexError};
pub use provider::{ChatExchange, Completion, Embedding, MockProvider, Provider, ProviderError, TokenUsage};
pub use store::{Role, Store, StoreError, SummaryRecord};
pub use time::Timestamp;
