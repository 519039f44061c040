//! Dual-state data model.
//!
//! The workflow state is a total truth assignment over guard identifiers and
//! is the only thing control flow looks at. Artifacts and the generation
//! context form the environment side; they never feed back into control
//! except through a guard verdict.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guards::{Dependencies, Guard, GuardError};
use crate::repository::{ArtifactId, RepositoryView};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("guard id must be non-empty")]
    EmptyGuardId,
    #[error("duplicate guard id `{0}`")]
    DuplicateGuard(GuardId),
    #[error("guard `{0}` is not part of this workflow state")]
    UnknownGuard(GuardId),
}

/// Identifier of a guard, unique within one workflow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GuardId(String);

impl GuardId {
    pub fn new(id: impl Into<String>) -> Result<Self, StateError> {
        let id = id.into();
        if id.is_empty() {
            return Err(StateError::EmptyGuardId);
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for GuardId {
    type Error = StateError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<GuardId> for String {
    fn from(id: GuardId) -> Self {
        id.0
    }
}

impl fmt::Display for GuardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Total assignment `guard -> passed` over a workflow's guard set.
///
/// Equality is structural over the whole map and ignores insertion order;
/// serialization keeps declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkflowState {
    assignment: IndexMap<GuardId, bool>,
}

impl WorkflowState {
    /// All guards unsatisfied.
    pub fn initial<I>(guards: I) -> Result<Self, StateError>
    where
        I: IntoIterator<Item = GuardId>,
    {
        let mut assignment = IndexMap::new();
        for guard in guards {
            if assignment.insert(guard.clone(), false).is_some() {
                return Err(StateError::DuplicateGuard(guard));
            }
        }
        Ok(Self { assignment })
    }

    pub fn from_assignment<I>(pairs: I) -> Result<Self, StateError>
    where
        I: IntoIterator<Item = (GuardId, bool)>,
    {
        let mut assignment = IndexMap::new();
        for (guard, passed) in pairs {
            if assignment.insert(guard.clone(), passed).is_some() {
                return Err(StateError::DuplicateGuard(guard));
            }
        }
        Ok(Self { assignment })
    }

    pub fn get(&self, guard: &GuardId) -> Option<bool> {
        self.assignment.get(guard).copied()
    }

    pub fn is_satisfied(&self, guard: &str) -> bool {
        self.assignment
            .iter()
            .any(|(g, passed)| g.as_str() == guard && *passed)
    }

    pub fn guards(&self) -> impl Iterator<Item = &GuardId> {
        self.assignment.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GuardId, bool)> {
        self.assignment.iter().map(|(g, v)| (g, *v))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn passed_count(&self) -> usize {
        self.assignment.values().filter(|v| **v).count()
    }

    /// Goal test: every guard satisfied. Vacuously true for an empty workflow.
    pub fn is_goal(&self) -> bool {
        self.assignment.values().all(|v| *v)
    }

    /// Workflow transition function.
    ///
    /// A failing verdict leaves the state untouched; a passing one sets the
    /// guard's bit. Bits are never cleared.
    pub fn transition(&self, guard: &GuardId, passed: bool) -> Result<Self, StateError> {
        if !self.assignment.contains_key(guard) {
            return Err(StateError::UnknownGuard(guard.clone()));
        }
        if !passed {
            return Ok(self.clone());
        }
        let mut next = self.clone();
        next.assignment.insert(guard.clone(), true);
        Ok(next)
    }
}

/// Guard verdict: boolean outcome plus diagnostic feedback.
///
/// Passing verdicts carry empty feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub feedback: String,
}

impl Verdict {
    pub fn pass() -> Self {
        Self {
            passed: true,
            feedback: String::new(),
        }
    }

    pub fn fail(feedback: impl Into<String>) -> Self {
        Self {
            passed: false,
            feedback: feedback.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub artifact: ArtifactId,
    pub feedback: String,
}

/// Guard rejections accumulated for the node currently being worked on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeedbackHistory(Vec<FeedbackEntry>);

impl FeedbackHistory {
    pub fn entries(&self) -> &[FeedbackEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn latest(&self) -> Option<&FeedbackEntry> {
        self.0.last()
    }
}

/// Read-only part of the context: the repository and global constraints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AmbientEnvironment {
    pub repository: Option<RepositoryView>,
    pub global_constraints: Vec<String>,
}

impl AmbientEnvironment {
    pub fn new(repository: Option<RepositoryView>, global_constraints: Vec<String>) -> Self {
        Self {
            repository,
            global_constraints,
        }
    }
}

/// Hierarchical generation context: ambient environment, task specification
/// and the failure history of the current node.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    ambient: AmbientEnvironment,
    spec: String,
    current_artifact: Option<ArtifactId>,
    feedback: FeedbackHistory,
}

impl Context {
    pub fn new(ambient: AmbientEnvironment, spec: impl Into<String>) -> Self {
        Self {
            ambient,
            spec: spec.into(),
            current_artifact: None,
            feedback: FeedbackHistory::default(),
        }
    }

    pub fn ambient(&self) -> &AmbientEnvironment {
        &self.ambient
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn current_artifact(&self) -> Option<&ArtifactId> {
        self.current_artifact.as_ref()
    }

    pub fn feedback(&self) -> &FeedbackHistory {
        &self.feedback
    }

    /// Fold a rejected artifact and its feedback into the history.
    pub fn refine(&self, artifact: ArtifactId, feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        debug_assert!(!feedback.is_empty(), "only failures refine the context");
        let mut next = self.clone();
        next.feedback.0.push(FeedbackEntry {
            artifact: artifact.clone(),
            feedback,
        });
        next.current_artifact = Some(artifact);
        next
    }

    pub fn clear_feedback(&self) -> Self {
        let mut next = self.clone();
        next.feedback.0.clear();
        next
    }
}

/// Project an environment state `(artifact, context)` onto the workflow
/// state space by evaluating every guard on it.
pub fn project(
    artifact: &str,
    ctx: &Context,
    deps: &Dependencies,
    guards: &[(GuardId, &dyn Guard)],
) -> Result<WorkflowState, GuardError> {
    let mut pairs = Vec::with_capacity(guards.len());
    for (id, guard) in guards {
        let verdict = guard.evaluate(artifact, ctx, deps)?;
        pairs.push((id.clone(), verdict.passed));
    }
    WorkflowState::from_assignment(pairs)
        .map_err(|e| GuardError::Misconfigured(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gid(s: &str) -> GuardId {
        GuardId::new(s).unwrap()
    }

    fn state(pairs: &[(&str, bool)]) -> WorkflowState {
        WorkflowState::from_assignment(pairs.iter().map(|(g, v)| (gid(g), *v))).unwrap()
    }

    #[test]
    fn failing_verdict_keeps_state() {
        let s = state(&[("g1", false)]);
        assert_eq!(s.transition(&gid("g1"), false).unwrap(), s);
    }

    #[test]
    fn passing_verdict_sets_one_bit() {
        let s = state(&[("g1", false), ("g2", false)]);
        let next = s.transition(&gid("g1"), true).unwrap();
        assert_eq!(next, state(&[("g1", true), ("g2", false)]));
    }

    #[test]
    fn repeated_pass_is_idempotent() {
        let s = state(&[("g1", true)]);
        assert_eq!(s.transition(&gid("g1"), true).unwrap(), s);
    }

    #[test]
    fn unknown_guard_is_rejected() {
        let s = state(&[("g1", false)]);
        assert_eq!(
            s.transition(&gid("nope"), true),
            Err(StateError::UnknownGuard(gid("nope")))
        );
    }

    #[test]
    fn empty_and_duplicate_ids_rejected() {
        assert_eq!(GuardId::new(""), Err(StateError::EmptyGuardId));
        assert!(WorkflowState::initial([gid("a"), gid("a")]).is_err());
    }

    #[test]
    fn empty_state_is_goal() {
        assert!(WorkflowState::initial([]).unwrap().is_goal());
    }

    #[test]
    fn refine_appends_in_order_and_clear_restores() {
        let ambient = AmbientEnvironment::new(None, vec!["no network".into()]);
        let ctx = Context::new(ambient, "Implement a Stack");
        let a1 = ArtifactId::from_hex("aa");
        let a2 = ArtifactId::from_hex("bb");

        let one = ctx.refine(a1.clone(), "SyntaxError line 3");
        assert_eq!(one.feedback().len(), 1);
        assert_eq!(one.feedback().entries()[0].feedback, "SyntaxError line 3");
        assert_eq!(one.current_artifact(), Some(&a1));

        let two = one.refine(a2.clone(), "phi2");
        let texts: Vec<_> = two.feedback().entries().iter().map(|e| e.feedback.as_str()).collect();
        assert_eq!(texts, ["SyntaxError line 3", "phi2"]);

        let cleared = two.clear_feedback();
        assert!(cleared.feedback().is_empty());
        assert_eq!(cleared.ambient(), ctx.ambient());
        assert_eq!(cleared.spec(), ctx.spec());
        assert_eq!(cleared.clear_feedback(), cleared);
    }
}
