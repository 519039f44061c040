//! Deterministic guard library.
//!
//! A guard maps an artifact (plus context and the committed artifacts of the
//! node's dependencies) to a [`Verdict`]. A failing verdict means "artifact
//! judged invalid" and consumes a retry; a [`GuardError`] means the guard
//! itself could not run and aborts the workflow.

use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use thiserror::Error;

pub use crate::state::Verdict;
use crate::state::Context;

mod combinators;
mod command;
mod human;
mod imports;
mod precommit;
pub mod process;
mod registry;
pub mod sandbox;

pub use combinators::{CompositeGuard, ParallelGuard};
pub use command::ExternalCommandGuard;
pub use human::HumanGuard;
pub use imports::{scan_imports, ImportBoundaryGuard, ImportStatement, DEFAULT_DENIED_MODULES};
pub use precommit::{PreCommitGuard, SECRET_PATTERNS};
pub use registry::{GuardFactory, GuardRegistry, GuardSettings};
pub use sandbox::{
    CharacterizationGuard, CoverageGuard, DynamicTestGuard, ShimAction, ShimClient, ShimFailure,
    ShimRequest, ShimResponse, ShimVerdict, SyntaxGuard,
};

/// Default wall-clock limit for guards that run external processes.
pub const DEFAULT_GUARD_TIMEOUT: Duration = Duration::from_secs(60);

const FEEDBACK_HEAD_BYTES: usize = 2 * 1024;
const FEEDBACK_TAIL_BYTES: usize = 6 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuardError {
    /// Tooling needed by the guard is missing or crashed.
    #[error("guard infrastructure failure: {0}")]
    Infrastructure(String),
    #[error("guard needs dependency artifact `{0}` which was not supplied")]
    MissingDependency(String),
    #[error("interactive channel closed")]
    ChannelClosed,
    #[error("guard misconfigured: {0}")]
    Misconfigured(String),
    #[error("unknown guard type `{0}`")]
    UnknownType(String),
}

/// Committed artifacts of a node's dependencies, keyed by node id, in
/// `requires` order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dependencies(IndexMap<String, String>);

impl Dependencies {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, node_id: impl Into<String>, content: impl Into<String>) -> Self {
        self.insert(node_id, content);
        self
    }

    pub fn insert(&mut self, node_id: impl Into<String>, content: impl Into<String>) {
        self.0.insert(node_id.into(), content.into());
    }

    pub fn get(&self, node_id: &str) -> Option<&str> {
        self.0.get(node_id).map(String::as_str)
    }

    pub fn first(&self) -> Option<(&str, &str)> {
        self.0.first().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The named dependency, or the first one when no name is configured.
    pub(crate) fn resolve(&self, name: Option<&str>, role: &str) -> Result<&str, GuardError> {
        match name {
            Some(name) => self
                .get(name)
                .ok_or_else(|| GuardError::MissingDependency(name.to_string())),
            None => self
                .first()
                .map(|(_, v)| v)
                .ok_or_else(|| GuardError::MissingDependency(role.to_string())),
        }
    }
}

pub trait Guard: Send + Sync {
    fn type_name(&self) -> &str;

    fn evaluate(&self, artifact: &str, ctx: &Context, deps: &Dependencies)
        -> Result<Verdict, GuardError>;

    /// Whether re-evaluating on the same inputs reproduces the verdict.
    /// Interactive guards return false and are replayed from the record.
    fn is_replayable(&self) -> bool {
        true
    }
}

impl<G: Guard + ?Sized> Guard for Arc<G> {
    fn type_name(&self) -> &str {
        (**self).type_name()
    }

    fn evaluate(&self, artifact: &str, ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        (**self).evaluate(artifact, ctx, deps)
    }

    fn is_replayable(&self) -> bool {
        (**self).is_replayable()
    }
}

type GuardFn = dyn Fn(&str, &Context, &Dependencies) -> Result<Verdict, GuardError> + Send + Sync;

/// Guard backed by a closure. Handy for tests and for embedding custom
/// predicates without a new type.
pub struct FnGuard {
    name: String,
    f: Box<GuardFn>,
}

impl FnGuard {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&str, &Context, &Dependencies) -> Result<Verdict, GuardError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Box::new(f),
        }
    }

    pub fn always_pass() -> Self {
        Self::new("always_pass", |_, _, _| Ok(Verdict::pass()))
    }

    pub fn always_fail(feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        Self::new("always_fail", move |_, _, _| Ok(Verdict::fail(feedback.clone())))
    }
}

impl Guard for FnGuard {
    fn type_name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, artifact: &str, ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        (self.f)(artifact, ctx, deps)
    }
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while i > 0 && !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Last `max_bytes` of `s`, cut on a char boundary.
pub fn tail(s: &str, max_bytes: usize) -> &str {
    if s.len() <= max_bytes {
        return s;
    }
    &s[ceil_char_boundary(s, s.len() - max_bytes)..]
}

/// Keep the first 2 KiB and last 6 KiB of long feedback.
pub fn truncate_feedback(feedback: &str) -> String {
    if feedback.len() <= FEEDBACK_HEAD_BYTES + FEEDBACK_TAIL_BYTES {
        return feedback.to_string();
    }
    let head_end = floor_char_boundary(feedback, FEEDBACK_HEAD_BYTES);
    let tail_start = ceil_char_boundary(feedback, feedback.len() - FEEDBACK_TAIL_BYTES);
    format!(
        "{}\n[... {} bytes elided ...]\n{}",
        &feedback[..head_end],
        tail_start - head_end,
        &feedback[tail_start..]
    )
}

pub(crate) fn timeout_feedback(timeout: Duration) -> String {
    let secs = timeout.as_secs_f64();
    if secs.fract() == 0.0 {
        format!("timeout after {}s", secs as u64)
    } else {
        format!("timeout after {secs}s")
    }
}
