//! Per-user knowledge graph of `(subject, predicate, object)` triplets.
//!
//! Triplets come from user messages only. Each one is written twice: as a
//! relational row in the [`Store`] and as an embedding of the text
//! `"subject predicate object"` in the [`EmbeddingIndex`]. The two writes
//! succeed or fail together.
//!
//! The persona graph is rebuilt from the rows: nodes are canonical entity
//! labels (lowercased, trimmed, inner whitespace collapsed) and every row
//! is one edge. Contradicting facts are kept side by side; recency weights
//! resolve them at retrieval time.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ids::TripletId;
use crate::index::{EmbeddingIndex, IndexError};
use crate::provider::{ChatExchange, Provider, ProviderError, Task, TokenUsage};
use crate::store::{InsertTripletError, Store, StoreError, TripletDraft};
use crate::template::PromptTemplate;
use crate::time::Timestamp;

/// Separator of the line format `subject|predicate|object`.
pub const FIELD_SEPARATOR: char = '|';

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Index(#[from] IndexError),

    #[error("stored {} of the triplets before failing: {source}", stored.len())]
    Partial {
        stored: Vec<TripletId>,
        #[source]
        source: Box<GraphError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    /// Trimmed, non-empty fields without separators or line breaks.
    pub fn new(subject: &str, predicate: &str, object: &str) -> Result<Self, GraphError> {
        let clean = |name: &str, value: &str| {
            let value = value.trim();
            if value.is_empty() {
                return Err(GraphError::InvalidTriplet(format!("{name} is empty")));
            }
            if value.contains(FIELD_SEPARATOR) || value.contains(['\n', '\r']) {
                return Err(GraphError::InvalidTriplet(format!(
                    "{name} contains a separator: {value:?}"
                )));
            }
            Ok(value.to_string())
        };
        Ok(Self {
            subject: clean("subject", subject)?,
            predicate: clean("predicate", predicate)?,
            object: clean("object", object)?,
        })
    }

    /// The text that gets embedded: `"subject predicate object"`.
    pub fn embedding_text(&self) -> String {
        format!("{} {} {}", self.subject, self.predicate, self.object)
    }
}

/// Parse `subject|predicate|object` lines, skipping anything malformed.
pub fn parse_triplet_lines(text: &str) -> Vec<Triplet> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim().trim_start_matches(['-', '*']).trim();
            let mut parts = line.split(FIELD_SEPARATOR);
            let (s, p, o) = (parts.next()?, parts.next()?, parts.next()?);
            if parts.next().is_some() {
                return None;
            }
            Triplet::new(s, p, o).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTriplet {
    pub triplet_id: TripletId,
    pub triplet: Triplet,
    pub user_name: String,
    pub session_id: String,
    pub source_message: String,
    pub created_at: Timestamp,
    /// Entry id in the embedding index.
    pub embedding_ref: u64,
}

/// Lowercase, trim and collapse inner whitespace.
pub fn canonical_label(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PersonaEdge {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub triplet_id: TripletId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaGraph {
    pub user_name: String,
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<PersonaEdge>,
}

impl PersonaGraph {
    pub fn from_triplets(user_name: &str, triplets: &[StoredTriplet]) -> Self {
        let mut graph = PersonaGraph {
            user_name: user_name.to_string(),
            nodes: BTreeSet::new(),
            edges: BTreeSet::new(),
        };
        for t in triplets {
            let subject = canonical_label(&t.triplet.subject);
            let object = canonical_label(&t.triplet.object);
            graph.nodes.insert(subject.clone());
            graph.nodes.insert(object.clone());
            graph.edges.insert(PersonaEdge {
                subject,
                predicate: t.triplet.predicate.clone(),
                object,
                triplet_id: t.triplet_id.clone(),
            });
        }
        graph
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub const DEFAULT_EXTRACTION_TEMPLATE: &str = include_str!("../assets/extraction_prompt.txt");

const EXTRACTION_SYSTEM: &str =
    "You extract durable facts about the user from a single chat message.";

/// Triplet extraction, storage and persona reconstruction.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    store: Arc<Store>,
    index: Arc<EmbeddingIndex>,
    template: PromptTemplate,
    max_tokens: u32,
}

impl KnowledgeGraph {
    pub fn new(store: Arc<Store>, index: Arc<EmbeddingIndex>, template: PromptTemplate, max_tokens: u32) -> Self {
        Self {
            store,
            index,
            template,
            max_tokens,
        }
    }

    /// Extract triplets from one user message.
    ///
    /// Only the user's own text is sent; lines that do not parse are
    /// dropped.
    pub fn extract_triplets(
        &self,
        provider: &dyn Provider,
        user_message: &str,
    ) -> Result<(Vec<Triplet>, TokenUsage), GraphError> {
        if user_message.trim().is_empty() {
            return Err(ProviderError::EmptyText.into());
        }
        let prompt = self.template.render(&[("message", user_message)]);
        let exchange = ChatExchange::new(
            EXTRACTION_SYSTEM,
            prompt,
            Task::ExtractTriplets {
                message: user_message.to_string(),
            },
        )
        .with_max_output_tokens(self.max_tokens);
        let completion = provider.chat_complete(&exchange)?;
        Ok((parse_triplet_lines(&completion.text), completion.usage))
    }

    /// Persist triplets as rows and index entries.
    ///
    /// Each triplet is stored atomically; on failure the ids already stored
    /// are reported in [`GraphError::Partial`].
    pub fn store_triplets(
        &self,
        provider: &dyn Provider,
        triplets: &[Triplet],
        user_name: &str,
        session_id: &str,
        source_message: &str,
        created_at: Timestamp,
    ) -> Result<Vec<TripletId>, GraphError> {
        let mut stored = Vec::with_capacity(triplets.len());
        for triplet in triplets {
            match self.store_one(provider, triplet, user_name, session_id, source_message, created_at) {
                Ok(id) => stored.push(id),
                Err(e) if stored.is_empty() => return Err(e),
                Err(e) => {
                    return Err(GraphError::Partial {
                        stored,
                        source: Box::new(e),
                    })
                }
            }
        }
        Ok(stored)
    }

    fn store_one(
        &self,
        provider: &dyn Provider,
        triplet: &Triplet,
        user_name: &str,
        session_id: &str,
        source_message: &str,
        created_at: Timestamp,
    ) -> Result<TripletId, GraphError> {
        let vector = provider.embed(&triplet.embedding_text())?;
        let draft = TripletDraft {
            triplet: triplet.clone(),
            user_name: user_name.to_string(),
            session_id: session_id.to_string(),
            source_message: source_message.to_string(),
            created_at,
        };
        let result = self.store.insert_triplet(&draft, |id| {
            self.index.push(user_name, &vector, id.as_str(), created_at)
        });
        match result {
            Ok(stored) => Ok(stored.triplet_id),
            Err(InsertTripletError::Index(e)) => Err(e.into()),
            Err(InsertTripletError::Before(e)) => Err(e.into()),
            Err(InsertTripletError::Store { error, orphan_entry }) => {
                if let Err(e) = self.index.retract(orphan_entry) {
                    log::error!("could not retract orphaned index entry {orphan_entry}: {e}");
                }
                Err(error.into())
            }
        }
    }

    pub fn get_persona(&self, user_name: &str) -> Result<PersonaGraph, GraphError> {
        let triplets = self.store.list_triplets(user_name)?;
        Ok(PersonaGraph::from_triplets(user_name, &triplets))
    }
}
