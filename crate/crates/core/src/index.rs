//! Exact cosine top-K search over per-user triplet embeddings.
//!
//! Entries live in memory and, for file-backed indexes, in an append-only
//! segment file that is replayed on open.
//!
//! File layout (little endian):
//!
//! ```text
//! header : magic "KGVX" | u32 version (=1) | u32 dimension
//! record : u8 kind
//!   kind 1 (entry)     : u64 entry_id | i64 created_at_ms
//!                        | u32 len | user_name bytes
//!                        | u32 len | payload bytes (triplet id)
//!                        | dimension x f32
//!   kind 2 (tombstone) : u64 entry_id
//! ```
//!
//! A truncated trailing record (interrupted write) is cut off on open.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

use crate::provider::Embedding;
use crate::time::{from_millis, to_millis, Timestamp};

pub const MAGIC: &[u8; 4] = b"KGVX";
pub const FORMAT_VERSION: u32 = 1;

const KIND_ENTRY: u8 = 1;
const KIND_TOMBSTONE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("entry id {0} already present")]
    DuplicateId(u64),

    #[error("k must be at least 1")]
    ZeroK,

    #[error("bad index file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub entry_id: u64,
    pub user_name: String,
    pub vector: Vec<f32>,
    /// Id of the triplet this vector embeds.
    pub payload: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry: IndexEntry,
    pub similarity: f64,
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either norm is 0.
pub fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let y = f64::from(*y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Result order: similarity descending, then newer first, then lower id.
pub fn rank_order(a: &ScoredEntry, b: &ScoredEntry) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| b.entry.created_at.cmp(&a.entry.created_at))
        .then_with(|| a.entry.entry_id.cmp(&b.entry.entry_id))
}

struct Segment {
    path: PathBuf,
    writer: BufWriter<File>,
}

#[derive(Default)]
struct Inner {
    entries: Vec<IndexEntry>,
    positions: HashMap<u64, usize>,
    next_id: u64,
    segment: Option<Segment>,
}

impl Inner {
    fn insert(&mut self, entry: IndexEntry) {
        self.next_id = self.next_id.max(entry.entry_id + 1);
        self.positions.insert(entry.entry_id, self.entries.len());
        self.entries.push(entry);
    }

    fn remove(&mut self, entry_id: u64) -> bool {
        let Some(at) = self.positions.remove(&entry_id) else {
            return false;
        };
        self.entries.remove(at);
        for pos in self.positions.values_mut() {
            if *pos > at {
                *pos -= 1;
            }
        }
        true
    }
}

pub struct EmbeddingIndex {
    dimension: usize,
    inner: RwLock<Inner>,
}

impl std::fmt::Debug for EmbeddingIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingIndex")
            .field("dimension", &self.dimension)
            .field("len", &self.len())
            .finish()
    }
}

impl EmbeddingIndex {
    pub fn in_memory(dimension: usize) -> Self {
        Self {
            dimension,
            inner: RwLock::new(Inner::default()),
        }
    }

    /// Open (or create) a file-backed index.
    pub fn open(path: impl AsRef<Path>, dimension: usize) -> Result<Self, IndexError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut inner = Inner::default();
        if file.metadata()?.len() == 0 {
            let mut header = Vec::with_capacity(12);
            header.extend_from_slice(MAGIC);
            header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            header.extend_from_slice(&(dimension as u32).to_le_bytes());
            file.write_all(&header)?;
            file.sync_data()?;
        } else {
            let valid_len = replay(&path, &mut file, dimension, &mut inner)?;
            if valid_len < file.metadata()?.len() {
                log::warn!(
                    "{}: dropping truncated trailing record at byte {valid_len}",
                    path.display()
                );
                file.set_len(valid_len)?;
            }
        }
        inner.segment = Some(Segment {
            path,
            writer: BufWriter::new(file),
        });
        Ok(Self {
            dimension,
            inner: RwLock::new(inner),
        })
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_for_user(&self, user_name: &str) -> usize {
        self.read()
            .entries
            .iter()
            .filter(|e| e.user_name == user_name)
            .count()
    }

    pub fn get(&self, entry_id: u64) -> Option<IndexEntry> {
        let inner = self.read();
        inner.positions.get(&entry_id).map(|&i| inner.entries[i].clone())
    }

    /// Add an entry with a caller-chosen id.
    pub fn add(&self, entry: IndexEntry) -> Result<(), IndexError> {
        if entry.vector.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: entry.vector.len(),
            });
        }
        let mut inner = self.write();
        if inner.positions.contains_key(&entry.entry_id) {
            return Err(IndexError::DuplicateId(entry.entry_id));
        }
        if let Some(segment) = inner.segment.as_mut() {
            append_entry(segment, &entry)?;
        }
        inner.insert(entry);
        Ok(())
    }

    /// Add an embedding under the next free id and return that id.
    pub fn push(
        &self,
        user_name: &str,
        vector: &Embedding,
        payload: &str,
        created_at: Timestamp,
    ) -> Result<u64, IndexError> {
        if vector.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: vector.dimension(),
            });
        }
        let mut inner = self.write();
        let entry = IndexEntry {
            entry_id: inner.next_id,
            user_name: user_name.to_string(),
            vector: vector.values().iter().map(|v| *v as f32).collect(),
            payload: payload.to_string(),
            created_at,
        };
        if let Some(segment) = inner.segment.as_mut() {
            append_entry(segment, &entry)?;
        }
        let id = entry.entry_id;
        inner.insert(entry);
        Ok(id)
    }

    /// Withdraw an entry whose relational row never committed.
    pub fn retract(&self, entry_id: u64) -> Result<bool, IndexError> {
        let mut inner = self.write();
        if !inner.positions.contains_key(&entry_id) {
            return Ok(false);
        }
        if let Some(segment) = inner.segment.as_mut() {
            let mut record = vec![KIND_TOMBSTONE];
            record.extend_from_slice(&entry_id.to_le_bytes());
            segment.writer.write_all(&record)?;
            segment.writer.flush()?;
        }
        Ok(inner.remove(entry_id))
    }

    /// Flush and fsync the segment file.
    pub fn sync(&self) -> Result<(), IndexError> {
        if let Some(segment) = self.write().segment.as_mut() {
            segment.writer.flush()?;
            segment.writer.get_ref().sync_data()?;
        }
        Ok(())
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.read().segment.as_ref().map(|s| s.path.clone())
    }

    /// Exact top-`k` cosine matches among `user_name`'s entries.
    pub fn query_top_k(
        &self,
        query: &Embedding,
        user_name: &str,
        k: usize,
    ) -> Result<Vec<ScoredEntry>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: query.dimension(),
            });
        }
        let inner = self.read();
        let mut scored: Vec<ScoredEntry> = inner
            .entries
            .iter()
            .filter(|e| e.user_name == user_name)
            .map(|e| ScoredEntry {
                similarity: cosine(query.values(), &e.vector),
                entry: e.clone(),
            })
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(k);
        Ok(scored)
    }
}

fn append_entry(segment: &mut Segment, entry: &IndexEntry) -> Result<(), IndexError> {
    let mut record = Vec::with_capacity(29 + entry.user_name.len() + entry.payload.len() + 4 * entry.vector.len());
    record.push(KIND_ENTRY);
    record.extend_from_slice(&entry.entry_id.to_le_bytes());
    record.extend_from_slice(&to_millis(&entry.created_at).to_le_bytes());
    record.extend_from_slice(&(entry.user_name.len() as u32).to_le_bytes());
    record.extend_from_slice(entry.user_name.as_bytes());
    record.extend_from_slice(&(entry.payload.len() as u32).to_le_bytes());
    record.extend_from_slice(entry.payload.as_bytes());
    for v in &entry.vector {
        record.extend_from_slice(&v.to_le_bytes());
    }
    segment.writer.write_all(&record)?;
    segment.writer.flush()?;
    Ok(())
}

/// Load every complete record; returns the byte length of the valid prefix.
fn replay(path: &Path, file: &mut File, dimension: usize, inner: &mut Inner) -> Result<u64, IndexError> {
    let format_err = |reason: String| IndexError::Format {
        path: path.to_path_buf(),
        reason,
    };
    file.seek(SeekFrom::Start(0))?;
    let mut bytes = Vec::new();
    BufReader::new(&mut *file).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(format_err("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let stored_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if stored_dim != dimension {
        return Err(IndexError::DimensionMismatch {
            expected: dimension,
            got: stored_dim,
        });
    }
    let mut cursor = Cursor { bytes: &bytes, at: 12 };
    loop {
        let start = cursor.at;
        let Some(kind) = cursor.u8() else {
            return Ok(start as u64);
        };
        match kind {
            KIND_ENTRY => match read_entry(&mut cursor, dimension) {
                Some(entry) => inner.insert(entry),
                None => return Ok(start as u64),
            },
            KIND_TOMBSTONE => match cursor.u64() {
                Some(id) => {
                    inner.remove(id);
                }
                None => return Ok(start as u64),
            },
            other => return Err(format_err(format!("unknown record kind {other} at byte {start}"))),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let slice = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let len = self.u32()? as usize;
        self.take(len).map(|b| String::from_utf8_lossy(b).into_owned())
    }
}

fn read_entry(cursor: &mut Cursor<'_>, dimension: usize) -> Option<IndexEntry> {
    let entry_id = cursor.u64()?;
    let created_at = from_millis(cursor.u64()? as i64);
    let user_name = cursor.string()?;
    let payload = cursor.string()?;
    let raw = cursor.take(4 * dimension)?;
    let vector = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some(IndexEntry {
        entry_id,
        user_name,
        vector,
        payload,
        created_at,
    })
}
