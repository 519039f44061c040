//! Append-only, content-addressed artifact repository.
//!
//! Every generation attempt, accepted or rejected, becomes one immutable
//! record. Records link to the artifacts they were derived from, forming a
//! DAG whose edges always point backwards in the log.
//!
//! # Content address
//!
//! A record id is the lowercase hex SHA-256 of the compact JSON object
//!
//! ```text
//! {"attempt":<u32>,"content":<string>,"node_id":<string>,"parents":[<id>...],"verdict":{"feedback":<string>,"passed":<bool>}|null}
//! ```
//!
//! with keys in exactly that (lexicographic) order, no whitespace, strings
//! escaped as by `serde_json` (only `"`, `\` and control characters are
//! escaped; other code points are written as raw UTF-8). The timestamp is not
//! part of the preimage.
//!
//! # Log format
//!
//! One JSON object per line, UTF-8, `\n` terminated, fields in the order
//! `id, content, parents, node_id, attempt, verdict, ts`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::state::Verdict;

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("parent artifact `{0}` does not exist")]
    UnknownParent(ArtifactId),
    #[error("artifact `{0}` not found")]
    NotFound(ArtifactId),
    #[error("attempt numbers start at 1")]
    InvalidAttempt,
    #[error("log line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("repository i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArtifactId(String);

impl ArtifactId {
    pub fn from_hex(hex: impl Into<String>) -> Self {
        Self(hex.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(12)]
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub id: ArtifactId,
    pub content: String,
    pub parents: Vec<ArtifactId>,
    pub node_id: String,
    pub attempt: u32,
    pub verdict: Option<Verdict>,
    pub ts: u64,
}

#[derive(Serialize)]
struct CanonicalVerdict<'a> {
    feedback: &'a str,
    passed: bool,
}

#[derive(Serialize)]
struct CanonicalRecord<'a> {
    attempt: u32,
    content: &'a str,
    node_id: &'a str,
    parents: &'a [ArtifactId],
    verdict: Option<CanonicalVerdict<'a>>,
}

/// Canonical hash preimage of a record (see module docs).
pub fn canonical_bytes(
    content: &str,
    parents: &[ArtifactId],
    node_id: &str,
    attempt: u32,
    verdict: Option<&Verdict>,
) -> Vec<u8> {
    let canonical = CanonicalRecord {
        attempt,
        content,
        node_id,
        parents,
        verdict: verdict.map(|v| CanonicalVerdict {
            feedback: &v.feedback,
            passed: v.passed,
        }),
    };
    serde_json::to_vec(&canonical).expect("canonical record serializes")
}

pub fn content_address(
    content: &str,
    parents: &[ArtifactId],
    node_id: &str,
    attempt: u32,
    verdict: Option<&Verdict>,
) -> ArtifactId {
    let digest = Sha256::digest(canonical_bytes(content, parents, node_id, attempt, verdict));
    ArtifactId(hex::encode(digest))
}

impl ArtifactRecord {
    pub fn recompute_id(&self) -> ArtifactId {
        content_address(
            &self.content,
            &self.parents,
            &self.node_id,
            self.attempt,
            self.verdict.as_ref(),
        )
    }
}

/// Outcome of a chain verification, with the first problem found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainProblem {
    HashMismatch { position: usize, stored: ArtifactId },
    DanglingEdge { position: usize, parent: ArtifactId },
}

impl fmt::Display for ChainProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainProblem::HashMismatch { position, stored } => write!(
                f,
                "record {position} ({}) does not match its content hash",
                stored.short()
            ),
            ChainProblem::DanglingEdge { position, parent } => write!(
                f,
                "record {position} references {} which does not precede it",
                parent.short()
            ),
        }
    }
}

#[derive(Default)]
struct Log {
    records: Vec<ArtifactRecord>,
    // first position of each id
    index: HashMap<ArtifactId, usize>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl Log {
    fn position(&self, id: &ArtifactId) -> Result<usize, RepositoryError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| RepositoryError::NotFound(id.clone()))
    }

    fn push(&mut self, record: ArtifactRecord) {
        let pos = self.records.len();
        self.index.entry(record.id.clone()).or_insert(pos);
        self.records.push(record);
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Writer handle on the versioned repository.
///
/// Appends are serialized by an internal lock; any number of
/// [`RepositoryView`]s may read concurrently.
pub struct Repository {
    log: Arc<RwLock<Log>>,
    clock: fn() -> u64,
}

impl fmt::Debug for Repository {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Repository").field("len", &self.len()).finish()
    }
}

impl Default for Repository {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Repository {
    pub fn in_memory() -> Self {
        Self {
            log: Arc::new(RwLock::new(Log::default())),
            clock: now_millis,
        }
    }

    /// Replace the timestamp source (timestamps are outside the hash).
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    /// Open a log file for appending, loading any records already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RepositoryError> {
        let path = path.as_ref();
        let repo = if path.exists() {
            Self::load(path)?
        } else {
            Self::in_memory()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| RepositoryError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        repo.log.write().expect("repository lock").sink =
            Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(repo)
    }

    /// Read a log without verifying it; use [`Repository::verify_chain`]
    /// afterwards to check integrity.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RepositoryError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| RepositoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut log = Log::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| RepositoryError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.is_empty() {
                continue;
            }
            let record: ArtifactRecord = serde_json::from_str(&line)
                .map_err(|source| RepositoryError::Malformed { line: n + 1, source })?;
            log.push(record);
        }
        Ok(Self {
            log: Arc::new(RwLock::new(log)),
            clock: now_millis,
        })
    }

    pub fn from_records(records: Vec<ArtifactRecord>) -> Self {
        let mut log = Log::default();
        for r in records {
            log.push(r);
        }
        Self {
            log: Arc::new(RwLock::new(log)),
            clock: now_millis,
        }
    }

    pub fn view(&self) -> RepositoryView {
        RepositoryView {
            log: Arc::clone(&self.log),
        }
    }

    pub fn append(
        &self,
        content: impl Into<String>,
        parents: Vec<ArtifactId>,
        node_id: impl Into<String>,
        attempt: u32,
        verdict: Option<Verdict>,
    ) -> Result<ArtifactRecord, RepositoryError> {
        if attempt == 0 {
            return Err(RepositoryError::InvalidAttempt);
        }
        let content = content.into();
        let node_id = node_id.into();
        let mut log = self.log.write().expect("repository lock");
        if let Some(missing) = parents.iter().find(|p| !log.index.contains_key(*p)) {
            return Err(RepositoryError::UnknownParent(missing.clone()));
        }
        let id = content_address(&content, &parents, &node_id, attempt, verdict.as_ref());
        let record = ArtifactRecord {
            id,
            content,
            parents,
            node_id,
            attempt,
            verdict,
            ts: (self.clock)(),
        };
        if let Some((path, sink)) = log.sink.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            sink.write_all(&line)
                .and_then(|_| sink.flush())
                .map_err(|source| RepositoryError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        log.push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.view().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &ArtifactId) -> Result<ArtifactRecord, RepositoryError> {
        self.view().get(id)
    }

    pub fn ancestors(&self, id: &ArtifactId) -> Result<Vec<ArtifactRecord>, RepositoryError> {
        self.view().ancestors(id)
    }

    pub fn records(&self) -> Vec<ArtifactRecord> {
        self.view().records()
    }

    pub fn verify_chain(&self) -> bool {
        self.view().verify_chain()
    }

    pub fn find_problem(&self) -> Option<ChainProblem> {
        self.view().find_problem()
    }

    /// Serialize the whole log in the on-disk format.
    pub fn to_jsonl(&self) -> String {
        self.view().to_jsonl()
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), RepositoryError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| RepositoryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Read-only handle on a repository. Two views are equal when they observe
/// the same underlying log.
#[derive(Clone)]
pub struct RepositoryView {
    log: Arc<RwLock<Log>>,
}

impl fmt::Debug for RepositoryView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RepositoryView").field("len", &self.len()).finish()
    }
}

impl PartialEq for RepositoryView {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.log, &other.log)
    }
}

impl RepositoryView {
    pub fn len(&self) -> usize {
        self.log.read().expect("repository lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First record with this id.
    pub fn get(&self, id: &ArtifactId) -> Result<ArtifactRecord, RepositoryError> {
        let log = self.log.read().expect("repository lock");
        let pos = log.position(id)?;
        Ok(log.records[pos].clone())
    }

    /// Every record carrying this id, in log order.
    pub fn get_all(&self, id: &ArtifactId) -> Vec<ArtifactRecord> {
        let log = self.log.read().expect("repository lock");
        log.records.iter().filter(|r| &r.id == id).cloned().collect()
    }

    pub fn get_at(&self, position: usize) -> Option<ArtifactRecord> {
        self.log
            .read()
            .expect("repository lock")
            .records
            .get(position)
            .cloned()
    }

    /// Transitive parent closure of `id`, oldest first (log order, which is
    /// a topological order since edges only point backwards).
    pub fn ancestors(&self, id: &ArtifactId) -> Result<Vec<ArtifactRecord>, RepositoryError> {
        let log = self.log.read().expect("repository lock");
        let start = log.position(id)?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = Vec::new();
        for p in &log.records[start].parents {
            stack.push(log.position(p)?);
        }
        while let Some(pos) = stack.pop() {
            if !seen.insert(pos) {
                continue;
            }
            for p in &log.records[pos].parents {
                stack.push(log.position(p)?);
            }
        }
        Ok(seen.into_iter().map(|pos| log.records[pos].clone()).collect())
    }

    pub fn records(&self) -> Vec<ArtifactRecord> {
        self.log.read().expect("repository lock").records.clone()
    }

    pub fn records_for_node(&self, node_id: &str) -> Vec<ArtifactRecord> {
        let log = self.log.read().expect("repository lock");
        log.records
            .iter()
            .filter(|r| r.node_id == node_id)
            .cloned()
            .collect()
    }

    pub fn verify_chain(&self) -> bool {
        self.find_problem().is_none()
    }

    pub fn find_problem(&self) -> Option<ChainProblem> {
        let log = self.log.read().expect("repository lock");
        let mut earlier: BTreeSet<&ArtifactId> = BTreeSet::new();
        for (position, record) in log.records.iter().enumerate() {
            if record.recompute_id() != record.id {
                return Some(ChainProblem::HashMismatch {
                    position,
                    stored: record.id.clone(),
                });
            }
            if let Some(parent) = record.parents.iter().find(|p| !earlier.contains(p)) {
                return Some(ChainProblem::DanglingEdge {
                    position,
                    parent: parent.clone(),
                });
            }
            earlier.insert(&record.id);
        }
        None
    }

    pub fn to_jsonl(&self) -> String {
        let log = self.log.read().expect("repository lock");
        let mut out = String::new();
        for r in &log.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}
