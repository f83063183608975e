//! Relational conversation log: messages, session summaries, triplet rows,
//! token usage and warnings in one embedded SQLite database.
//!
//! The schema lives in `migrations/0001_init.sql` and is applied to empty
//! databases only. Opening a database stamped with another schema version
//! fails with [`StoreError::SchemaVersion`].

use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use crate::graph::{StoredTriplet, Triplet};
use crate::ids::{MessageId, TripletId};
use crate::provider::TokenUsage;
use crate::time::{from_millis, to_millis, Timestamp};

pub const SCHEMA_VERSION: i64 = 1;
const MIGRATION: &str = include_str!("../migrations/0001_init.sql");

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("schema version {found} does not match expected version {expected}")]
    SchemaVersion { found: i64, expected: i64 },

    #[error("invalid record: {0}")]
    Invalid(String),

    #[error("duplicate message id {0}")]
    DuplicateMessage(MessageId),

    #[error("message for session {session_id} at {got} precedes stored message at {last}")]
    OutOfOrder {
        session_id: String,
        last: Timestamp,
        got: Timestamp,
    },

    #[error("turns_covered for session {session_id} would drop from {stored} to {got}")]
    CounterRegression {
        session_id: String,
        stored: u64,
        got: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    fn parse(s: &str) -> Result<Self, StoreError> {
        match s {
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(StoreError::Invalid(format!("unknown role `{other}`"))),
        }
    }
}

/// One persisted conversational turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub message_id: MessageId,
    pub user_name: String,
    pub session_id: String,
    pub role: Role,
    pub content: String,
    pub created_at: Timestamp,
    pub usage: Option<TokenUsage>,
}

impl MessageRecord {
    fn validate(&self) -> Result<(), StoreError> {
        if self.message_id.as_str().is_empty() {
            return Err(StoreError::Invalid("message_id is empty".into()));
        }
        if self.user_name.is_empty() || self.session_id.is_empty() {
            return Err(StoreError::Invalid("user_name and session_id are required".into()));
        }
        if self.content.trim().is_empty() {
            return Err(StoreError::Invalid("message content is empty".into()));
        }
        Ok(())
    }
}

/// The rolling summary of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub session_id: String,
    pub user_name: String,
    pub summary_text: String,
    pub updated_at: Timestamp,
    pub turns_covered: u64,
}

/// Token usage of one provider call made on behalf of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub message_id: Option<MessageId>,
    pub user_name: String,
    pub session_id: String,
    pub purpose: String,
    pub usage: TokenUsage,
    pub created_at: Timestamp,
}

/// A degraded-but-not-failed event, e.g. a summary update that kept the
/// stale summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningRecord {
    pub user_name: String,
    pub session_id: String,
    pub stage: String,
    pub detail: String,
    pub created_at: Timestamp,
}

/// A triplet about to be written; the store assigns its id.
#[derive(Debug, Clone)]
pub struct TripletDraft {
    pub triplet: Triplet,
    pub user_name: String,
    pub session_id: String,
    pub source_message: String,
    pub created_at: Timestamp,
}

/// Failure of [`Store::insert_triplet`].
#[derive(Debug)]
pub enum InsertTripletError<E> {
    /// The index write failed; nothing was stored.
    Index(E),
    /// The relational write failed after the index write succeeded.
    Store {
        error: StoreError,
        orphan_entry: u64,
    },
    /// Failed before the index was touched.
    Before(StoreError),
}

pub struct Store {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").finish_non_exhaustive()
    }
}

const MESSAGE_COLUMNS: &str = "m.message_id, m.user_name, m.session_id, m.role, m.content, \
     m.created_at_ms, u.prompt_tokens, u.completion_tokens";

const TRIPLET_COLUMNS: &str = "triplet_id, user_name, session_id, subject, predicate, object, \
     source_message, created_at_ms, embedding_ref";

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        let version: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        match version {
            0 => {
                let tables: i64 = conn.query_row(
                    "SELECT COUNT(*) FROM sqlite_master WHERE type = 'table'",
                    [],
                    |r| r.get(0),
                )?;
                if tables > 0 {
                    return Err(StoreError::SchemaVersion {
                        found: 0,
                        expected: SCHEMA_VERSION,
                    });
                }
                conn.execute_batch(&format!("BEGIN;\n{MIGRATION}\nCOMMIT;"))?;
            }
            SCHEMA_VERSION => {}
            found => {
                return Err(StoreError::SchemaVersion {
                    found,
                    expected: SCHEMA_VERSION,
                })
            }
        }
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append_message(&self, record: &MessageRecord) -> Result<MessageId, StoreError> {
        self.append_messages(std::slice::from_ref(record))?;
        Ok(record.message_id.clone())
    }

    /// Append several messages in one transaction: all or none.
    pub fn append_messages(&self, records: &[MessageRecord]) -> Result<(), StoreError> {
        for record in records {
            record.validate()?;
        }
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        for record in records {
            insert_message(&tx, record)?;
        }
        tx.commit()?;
        Ok(())
    }

    /// All messages of a session, oldest first; equal timestamps keep
    /// insertion order.
    pub fn get_session_messages(&self, session_id: &str) -> Result<Vec<MessageRecord>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {MESSAGE_COLUMNS} FROM messages m
             LEFT JOIN usage u ON u.message_id = m.message_id AND u.purpose = 'message'
             WHERE m.session_id = ?1 ORDER BY m.created_at_ms, m.seq"
        ))?;
        let rows = stmt.query_map([session_id], message_row)?;
        rows.map(|r| r.map_err(StoreError::from).and_then(|r| r))
            .collect()
    }

    pub fn count_session_messages(&self, user_name: &str, session_id: &str) -> Result<u64, StoreError> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM messages WHERE user_name = ?1 AND session_id = ?2",
            params![user_name, session_id],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    pub fn message_count(&self) -> Result<u64, StoreError> {
        let n: i64 = self
            .conn()
            .query_row("SELECT COUNT(*) FROM messages", [], |r| r.get(0))?;
        Ok(n as u64)
    }

    /// Replace the session's summary. `turns_covered` may not decrease.
    pub fn upsert_summary(&self, record: &SummaryRecord) -> Result<(), StoreError> {
        if record.summary_text.trim().is_empty() {
            return Err(StoreError::Invalid("summary_text is empty".into()));
        }
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let stored: Option<i64> = tx
            .query_row(
                "SELECT turns_covered FROM summaries WHERE session_id = ?1",
                [&record.session_id],
                |r| r.get(0),
            )
            .optional()?;
        if let Some(stored) = stored.map(|s| s as u64).filter(|s| *s > record.turns_covered) {
            return Err(StoreError::CounterRegression {
                session_id: record.session_id.clone(),
                stored,
                got: record.turns_covered,
            });
        }
        tx.execute(
            "INSERT INTO summaries (session_id, user_name, summary_text, updated_at_ms, turns_covered)
             VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT (session_id) DO UPDATE SET
                user_name = excluded.user_name,
                summary_text = excluded.summary_text,
                updated_at_ms = excluded.updated_at_ms,
                turns_covered = excluded.turns_covered",
            params![
                record.session_id,
                record.user_name,
                record.summary_text,
                to_millis(&record.updated_at),
                record.turns_covered as i64
            ],
        )?;
        tx.commit()?;
        Ok(())
    }

    pub fn get_summary(&self, session_id: &str) -> Result<Option<SummaryRecord>, StoreError> {
        let summary = self
            .conn()
            .query_row(
                "SELECT session_id, user_name, summary_text, updated_at_ms, turns_covered
                 FROM summaries WHERE session_id = ?1",
                [session_id],
                |r| {
                    Ok(SummaryRecord {
                        session_id: r.get(0)?,
                        user_name: r.get(1)?,
                        summary_text: r.get(2)?,
                        updated_at: from_millis(r.get(3)?),
                        turns_covered: r.get::<_, i64>(4)? as u64,
                    })
                },
            )
            .optional()?;
        Ok(summary)
    }

    /// True iff any message or triplet exists for `user_name`.
    pub fn has_user_history(&self, user_name: &str) -> Result<bool, StoreError> {
        let found: bool = self.conn().query_row(
            "SELECT EXISTS (SELECT 1 FROM messages WHERE user_name = ?1)
                 OR EXISTS (SELECT 1 FROM triplets WHERE user_name = ?1)",
            [user_name],
            |r| r.get(0),
        )?;
        Ok(found)
    }

    /// Distinct user names with any message, sorted.
    pub fn users(&self) -> Result<Vec<String>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT user_name FROM messages UNION SELECT user_name FROM triplets ORDER BY 1",
        )?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Write one triplet row together with its index entry.
    ///
    /// `index_write` receives the assigned triplet id and returns the index
    /// entry id. It runs inside the row's transaction: if it fails nothing
    /// is committed; if the commit fails the caller gets the orphaned entry
    /// id back to retract it.
    pub fn insert_triplet<E>(
        &self,
        draft: &TripletDraft,
        index_write: impl FnOnce(&TripletId) -> Result<u64, E>,
    ) -> Result<StoredTriplet, InsertTripletError<E>> {
        let mut conn = self.conn();
        let tx = conn.transaction().map_err(|e| InsertTripletError::Before(e.into()))?;
        let seq: i64 = tx
            .query_row(
                "SELECT COUNT(*) FROM triplets WHERE user_name = ?1",
                [&draft.user_name],
                |r| r.get(0),
            )
            .map_err(|e| InsertTripletError::Before(e.into()))?;
        let triplet_id = TripletId::derive(&draft.user_name, seq as u64);
        let entry = index_write(&triplet_id).map_err(InsertTripletError::Index)?;
        let stored = StoredTriplet {
            triplet_id,
            triplet: draft.triplet.clone(),
            user_name: draft.user_name.clone(),
            session_id: draft.session_id.clone(),
            source_message: draft.source_message.clone(),
            created_at: draft.created_at,
            embedding_ref: entry,
        };
        let written = tx
            .execute(
                &format!("INSERT INTO triplets ({TRIPLET_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)"),
                params![
                    stored.triplet_id.as_str(),
                    stored.user_name,
                    stored.session_id,
                    stored.triplet.subject,
                    stored.triplet.predicate,
                    stored.triplet.object,
                    stored.source_message,
                    to_millis(&stored.created_at),
                    entry as i64
                ],
            )
            .and_then(|_| tx.commit());
        match written {
            Ok(()) => Ok(stored),
            Err(e) => Err(InsertTripletError::Store {
                error: e.into(),
                orphan_entry: entry,
            }),
        }
    }

    /// All triplets of a user in insertion order.
    pub fn list_triplets(&self, user_name: &str) -> Result<Vec<StoredTriplet>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {TRIPLET_COLUMNS} FROM triplets WHERE user_name = ?1 ORDER BY seq"
        ))?;
        let rows = stmt.query_map([user_name], triplet_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn get_triplet(&self, triplet_id: &TripletId) -> Result<Option<StoredTriplet>, StoreError> {
        let found = self
            .conn()
            .query_row(
                &format!("SELECT {TRIPLET_COLUMNS} FROM triplets WHERE triplet_id = ?1"),
                [triplet_id.as_str()],
                triplet_row,
            )
            .optional()?;
        Ok(found)
    }

    pub fn triplet_count(&self, user_name: &str) -> Result<u64, StoreError> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM triplets WHERE user_name = ?1",
            [user_name],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    pub fn record_usage(&self, record: &UsageRecord) -> Result<(), StoreError> {
        insert_usage(&self.conn(), record)
    }

    /// Usage rows for a session in insertion order.
    pub fn session_usage(&self, session_id: &str) -> Result<Vec<UsageRecord>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT message_id, user_name, session_id, purpose, prompt_tokens, completion_tokens,
                    created_at_ms
             FROM usage WHERE session_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([session_id], |r| {
            Ok(UsageRecord {
                message_id: r.get::<_, Option<String>>(0)?.map(MessageId),
                user_name: r.get(1)?,
                session_id: r.get(2)?,
                purpose: r.get(3)?,
                usage: TokenUsage::new(r.get::<_, i64>(4)? as u64, r.get::<_, i64>(5)? as u64),
                created_at: from_millis(r.get(6)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn record_warning(&self, record: &WarningRecord) -> Result<(), StoreError> {
        self.conn().execute(
            "INSERT INTO warnings (user_name, session_id, stage, detail, created_at_ms)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                record.user_name,
                record.session_id,
                record.stage,
                record.detail,
                to_millis(&record.created_at)
            ],
        )?;
        Ok(())
    }

    pub fn warnings(&self, user_name: &str) -> Result<Vec<WarningRecord>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT user_name, session_id, stage, detail, created_at_ms
             FROM warnings WHERE user_name = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([user_name], |r| {
            Ok(WarningRecord {
                user_name: r.get(0)?,
                session_id: r.get(1)?,
                stage: r.get(2)?,
                detail: r.get(3)?,
                created_at: from_millis(r.get(4)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }
}

fn insert_message(tx: &Connection, record: &MessageRecord) -> Result<(), StoreError> {
    let exists: Option<i64> = tx
        .query_row(
            "SELECT seq FROM messages WHERE message_id = ?1",
            [record.message_id.as_str()],
            |r| r.get(0),
        )
        .optional()?;
    if exists.is_some() {
        return Err(StoreError::DuplicateMessage(record.message_id.clone()));
    }
    let last: Option<i64> = tx.query_row(
        "SELECT MAX(created_at_ms) FROM messages WHERE session_id = ?1",
        [&record.session_id],
        |r| r.get(0),
    )?;
    let created = to_millis(&record.created_at);
    if let Some(last) = last.filter(|last| *last > created) {
        return Err(StoreError::OutOfOrder {
            session_id: record.session_id.clone(),
            last: from_millis(last),
            got: record.created_at,
        });
    }
    tx.execute(
        "INSERT INTO messages (message_id, user_name, session_id, role, content, created_at_ms)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![
            record.message_id.as_str(),
            record.user_name,
            record.session_id,
            record.role.as_str(),
            record.content,
            created
        ],
    )?;
    if let Some(usage) = &record.usage {
        insert_usage(
            tx,
            &UsageRecord {
                message_id: Some(record.message_id.clone()),
                user_name: record.user_name.clone(),
                session_id: record.session_id.clone(),
                purpose: "message".into(),
                usage: *usage,
                created_at: record.created_at,
            },
        )?;
    }
    Ok(())
}

fn insert_usage(conn: &Connection, record: &UsageRecord) -> Result<(), StoreError> {
    conn.execute(
        "INSERT INTO usage (message_id, user_name, session_id, purpose, prompt_tokens,
                            completion_tokens, total_tokens, created_at_ms)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
        params![
            record.message_id.as_ref().map(|m| m.as_str()),
            record.user_name,
            record.session_id,
            record.purpose,
            record.usage.prompt_tokens as i64,
            record.usage.completion_tokens as i64,
            record.usage.total_tokens as i64,
            to_millis(&record.created_at)
        ],
    )?;
    Ok(())
}

fn message_row(r: &Row<'_>) -> rusqlite::Result<Result<MessageRecord, StoreError>> {
    let role: String = r.get(3)?;
    let prompt: Option<i64> = r.get(6)?;
    let completion: Option<i64> = r.get(7)?;
    let usage = prompt
        .zip(completion)
        .map(|(p, c)| TokenUsage::new(p as u64, c as u64));
    let record = MessageRecord {
        message_id: MessageId(r.get(0)?),
        user_name: r.get(1)?,
        session_id: r.get(2)?,
        role: Role::User,
        content: r.get(4)?,
        created_at: from_millis(r.get(5)?),
        usage,
    };
    Ok(Role::parse(&role).map(|role| MessageRecord { role, ..record }))
}

fn triplet_row(r: &Row<'_>) -> rusqlite::Result<StoredTriplet> {
    Ok(StoredTriplet {
        triplet_id: TripletId(r.get(0)?),
        user_name: r.get(1)?,
        session_id: r.get(2)?,
        triplet: Triplet {
            subject: r.get(3)?,
            predicate: r.get(4)?,
            object: r.get(5)?,
        },
        source_message: r.get(6)?,
        created_at: from_millis(r.get(7)?),
        embedding_ref: r.get::<_, i64>(8)? as u64,
    })
}
