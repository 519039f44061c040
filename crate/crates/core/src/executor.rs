//! The control loop: pick the next ready node, generate, sense with the
//! node's guard, refine on failure, transition on success.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::generator::{extract_code, GenerationError, GenerationRequest, Generator};
use crate::guards::{truncate_feedback, Dependencies, Guard, GuardError, DEFAULT_GUARD_TIMEOUT};
use crate::repository::{ArtifactId, ArtifactRecord, Repository, RepositoryView};
use crate::state::{AmbientEnvironment, Context, Verdict, WorkflowState};
use crate::workflow::{render_prompt, ActionPairSpec, WorkflowSpec, DEFAULT_FEEDBACK_BUDGET};

/// Feedback recorded when a response carries no fenced code block.
pub const UNQUALIFIED_FEEDBACK: &str = "no code block in response";
const EMPTY_REJECTION_FEEDBACK: &str = "guard rejected the artifact without feedback";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One attempt per node; the guard only scores it.
    Baseline,
    Guarded,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Baseline, Mode::Guarded];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Guarded => "guarded",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "guarded" => Ok(Mode::Guarded),
            other => Err(format!("unknown mode `{other}` (expected baseline or guarded)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Retries allowed after the first attempt of a node.
    pub r_max: u32,
    pub guard_timeout: Duration,
    pub mode: Mode,
    pub feedback_byte_budget: usize,
    /// Generator transport failures tolerated per node before aborting.
    pub transport_retries: u32,
    pub global_constraints: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            r_max: 3,
            guard_timeout: DEFAULT_GUARD_TIMEOUT,
            mode: Mode::Guarded,
            feedback_byte_budget: DEFAULT_FEEDBACK_BUDGET,
            transport_retries: 2,
            global_constraints: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Retry budget for `node` under this configuration.
    pub fn retry_limit(&self, node: &ActionPairSpec) -> u32 {
        match self.mode {
            Mode::Baseline => 0,
            Mode::Guarded => node.retry_limit.unwrap_or(self.r_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub node_id: String,
    pub attempt: u32,
    pub state_before: WorkflowState,
    pub artifact_id: ArtifactId,
    pub verdict: Verdict,
    pub duration_ms: u64,
    /// The response contained a fenced code block.
    pub qualified: bool,
    /// The verdict can be recomputed from the artifact alone.
    pub replayable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Success,
    Failure,
    InfraAbort,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Failure => 1,
            RunStatus::InfraAbort => 3,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Success => "SUCCESS",
            RunStatus::Failure => "FAILURE",
            RunStatus::InfraAbort => "INFRA_ABORT",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub attempts: u32,
    pub retries: u32,
    pub wall_ms: u64,
}

/// Per-node line of the run summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSummary {
    pub node_id: String,
    pub attempts: u32,
    pub passed: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub final_state: WorkflowState,
    pub trace: Vec<TraceEvent>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Success
    }

    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }

    pub fn node_summaries(&self) -> Vec<NodeSummary> {
        let mut rows: IndexMap<&str, NodeSummary> = IndexMap::new();
        for e in &self.trace {
            let row = rows.entry(&e.node_id).or_insert_with(|| NodeSummary {
                node_id: e.node_id.clone(),
                attempts: 0,
                passed: false,
                duration_ms: 0,
            });
            row.attempts += 1;
            row.passed = e.verdict.passed;
            row.duration_ms += e.duration_ms;
        }
        rows.into_values().collect()
    }

    /// Step | Attempts | Guard Result | Duration table plus run totals.
    pub fn summary_table(&self) -> String {
        let rows = self.node_summaries();
        let width = rows.iter().map(|r| r.node_id.len()).chain([4]).max().unwrap();
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  Attempts  Guard Result  Duration", "Step");
        for r in &rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>12}  {:>7.1}s",
                r.node_id,
                r.attempts,
                if r.passed { "⊤" } else { "⊥" },
                r.duration_ms as f64 / 1000.0
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Total retries: {}", self.totals.retries);
        let _ = writeln!(out, "Total duration: {:.1}s", self.totals.wall_ms as f64 / 1000.0);
        let state = match self.status {
            RunStatus::Success => "COMPLETE".to_string(),
            RunStatus::Failure => format!(
                "FAILED at {}",
                self.failed_node.as_deref().unwrap_or("?")
            ),
            RunStatus::InfraAbort => format!(
                "ABORTED ({})",
                self.error.as_deref().unwrap_or("infrastructure error")
            ),
        };
        let _ = writeln!(out, "Workflow state: {state}");
        out
    }
}

pub fn trace_to_jsonl(trace: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in trace {
        out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
#[error("trace line {line}: {source}")]
pub struct TraceParseError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<TraceEvent>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| TraceParseError { line: i + 1, source }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOutcome {
    Passed(ArtifactRecord),
    Exhausted,
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct NodeRun {
    pub outcome: NodeOutcome,
    pub events: Vec<TraceEvent>,
    pub context: Context,
}

/// Executes workflows against one generator, guard set and repository.
pub struct Executor<'a> {
    generator: &'a dyn Generator,
    guards: &'a IndexMap<String, Arc<dyn Guard>>,
    repository: &'a Repository,
    config: &'a RunConfig,
}

impl<'a> Executor<'a> {
    pub fn new(
        generator: &'a dyn Generator,
        guards: &'a IndexMap<String, Arc<dyn Guard>>,
        repository: &'a Repository,
        config: &'a RunConfig,
    ) -> Self {
        Self {
            generator,
            guards,
            repository,
            config,
        }
    }

    /// Run one node's generate/sense/refine loop to success or exhaustion.
    pub fn execute_node(
        &self,
        spec: &WorkflowSpec,
        node: &ActionPairSpec,
        ctx: &Context,
        deps: &Dependencies,
        dependency_ids: &[ArtifactId],
        state_before: &WorkflowState,
    ) -> NodeRun {
        let mut ctx = ctx.clear_feedback();
        let mut events = Vec::new();
        let abort = |msg: String, events: Vec<TraceEvent>, context: Context| NodeRun {
            outcome: NodeOutcome::Aborted(msg),
            events,
            context,
        };
        let Some(guard) = self.guards.get(&node.node_id) else {
            return abort(format!("no guard instantiated for node `{}`", node.node_id), events, ctx);
        };
        let values = match node.placeholder_values(&spec.specification, deps) {
            Ok(v) => v,
            Err(e) => return abort(e.to_string(), events, ctx),
        };
        let retry_limit = self.config.retry_limit(node);
        let mut previous: Option<ArtifactId> = None;
        let mut transport_failures = 0;
        let mut attempt = 1;
        loop {
            let prompt = match render_prompt(node, &values, &ctx, self.config.feedback_byte_budget) {
                Ok(p) => p,
                Err(e) => return abort(e.to_string(), events, ctx),
            };
            let started = Instant::now();
            let request = GenerationRequest {
                node_id: &node.node_id,
                attempt,
                prompt: &prompt,
            };
            let generated = loop {
                match self.generator.generate(&request) {
                    Ok(g) => break g,
                    Err(GenerationError::Transport(msg)) if transport_failures < self.config.transport_retries => {
                        transport_failures += 1;
                        warn!(node = %node.node_id, attempt, "generator transport failure, retrying: {msg}");
                    }
                    Err(e) => return abort(e.to_string(), events, ctx),
                }
            };
            let parents: Vec<ArtifactId> = previous.iter().chain(dependency_ids).cloned().collect();

            let (content, verdict, qualified) = match generated.extracted_code {
                Some(code) => match guard.evaluate(&code, &ctx, deps) {
                    Ok(v) => (code, v, true),
                    Err(e) => {
                        let _ = self.repository.append(code, parents, &node.node_id, attempt, None);
                        return abort(format!("node `{}`: {e}", node.node_id), events, ctx);
                    }
                },
                None => (generated.raw_response, Verdict::fail(UNQUALIFIED_FEEDBACK), false),
            };
            let verdict = if !verdict.passed && verdict.feedback.is_empty() {
                Verdict::fail(EMPTY_REJECTION_FEEDBACK)
            } else {
                verdict
            };
            let record = match self
                .repository
                .append(content, parents, &node.node_id, attempt, Some(verdict.clone()))
            {
                Ok(r) => r,
                Err(e) => return abort(e.to_string(), events, ctx),
            };
            debug!(node = %node.node_id, attempt, passed = verdict.passed, artifact = record.id.short(), "attempt evaluated");
            events.push(TraceEvent {
                node_id: node.node_id.clone(),
                attempt,
                state_before: state_before.clone(),
                artifact_id: record.id.clone(),
                verdict: verdict.clone(),
                duration_ms: started.elapsed().as_millis() as u64,
                qualified,
                replayable: qualified && guard.is_replayable(),
            });
            if verdict.passed {
                return NodeRun {
                    outcome: NodeOutcome::Passed(record),
                    events,
                    context: ctx.clear_feedback(),
                };
            }
            if attempt > retry_limit {
                return NodeRun {
                    outcome: NodeOutcome::Exhausted,
                    events,
                    context: ctx,
                };
            }
            ctx = ctx.refine(record.id.clone(), truncate_feedback(&verdict.feedback));
            previous = Some(record.id);
            attempt += 1;
        }
    }

    pub fn execute_workflow(&self, spec: &WorkflowSpec) -> RunOutcome {
        let started = Instant::now();
        let mut state = spec.initial_state();
        let ambient = AmbientEnvironment::new(Some(self.repository.view()), self.config.global_constraints.clone());
        let mut ctx = Context::new(ambient, spec.specification.clone());
        let mut committed: HashMap<String, ArtifactRecord> = HashMap::new();
        let mut trace = Vec::new();
        let mut status = None;
        let mut failed_node = None;
        let mut error = None;

        while let Some(&node_id) = spec.ready_nodes(&state).first() {
            let node = spec.node(node_id).expect("ready nodes exist");
            let mut deps = Dependencies::new();
            let mut dep_ids = Vec::new();
            for r in &node.requires {
                let rec = &committed[r];
                deps.insert(r.clone(), rec.content.clone());
                dep_ids.push(rec.id.clone());
            }
            let run = self.execute_node(spec, node, &ctx, &deps, &dep_ids, &state);
            trace.extend(run.events);
            ctx = run.context;
            match run.outcome {
                NodeOutcome::Passed(record) => {
                    state = state
                        .transition(&node.guard_id(), true)
                        .expect("node guard is in the workflow state");
                    committed.insert(node.node_id.clone(), record);
                }
                NodeOutcome::Exhausted => {
                    status = Some(RunStatus::Failure);
                    failed_node = Some(node.node_id.clone());
                    break;
                }
                NodeOutcome::Aborted(msg) => {
                    status = Some(RunStatus::InfraAbort);
                    failed_node = Some(node.node_id.clone());
                    error = Some(msg);
                    break;
                }
            }
        }
        let status = status.unwrap_or(if state.is_goal() {
            RunStatus::Success
        } else {
            RunStatus::Failure
        });
        let attempts = trace.len() as u32;
        let distinct = trace.iter().map(|e| &e.node_id).collect::<std::collections::HashSet<_>>().len() as u32;
        RunOutcome {
            status,
            final_state: state,
            totals: Totals {
                attempts,
                retries: attempts - distinct,
                wall_ms: started.elapsed().as_millis() as u64,
            },
            trace,
            failed_node,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub node_id: String,
    pub attempt: u32,
    pub recorded: Verdict,
    pub reproduced: Option<Verdict>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub events: usize,
    pub reevaluated: usize,
    pub taken_from_record: usize,
    /// Events whose verdict matched but whose feedback text differed.
    pub feedback_drift: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn is_faithful(&self) -> bool {
        self.mismatches.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("artifact {0} referenced by the trace is not in the repository")]
    MissingArtifact(ArtifactId),
    #[error("trace names node `{0}` which the workflow does not define")]
    UnknownNode(String),
    #[error("replaying node `{node}`: {source}")]
    Guard { node: String, source: GuardError },
}

/// Re-evaluate every replayable event's guard on the recorded artifact.
///
/// Events that need a human or that never reached a guard are reproduced
/// from the record.
pub fn replay(
    spec: &WorkflowSpec,
    trace: &[TraceEvent],
    repository: &RepositoryView,
    guards: &IndexMap<String, Arc<dyn Guard>>,
) -> Result<ReplayReport, ReplayError> {
    let ambient = AmbientEnvironment::new(Some(repository.clone()), Vec::new());
    let base = Context::new(ambient, spec.specification.clone());
    let mut ctx = base.clone();
    let mut committed: HashMap<&str, String> = HashMap::new();
    let mut report = ReplayReport {
        events: trace.len(),
        ..ReplayReport::default()
    };
    let mut current_node: Option<&str> = None;

    for (index, event) in trace.iter().enumerate() {
        let node = spec
            .node(&event.node_id)
            .ok_or_else(|| ReplayError::UnknownNode(event.node_id.clone()))?;
        if current_node != Some(node.node_id.as_str()) {
            ctx = base.clear_feedback();
            current_node = Some(&node.node_id);
        }
        let record = repository
            .get(&event.artifact_id)
            .map_err(|_| ReplayError::MissingArtifact(event.artifact_id.clone()))?;
        let mismatch = |reproduced: Option<Verdict>, reason: &str| Mismatch {
            index,
            node_id: event.node_id.clone(),
            attempt: event.attempt,
            recorded: event.verdict.clone(),
            reproduced,
            reason: reason.to_string(),
        };

        if record.recompute_id() != record.id {
            report.mismatches.push(mismatch(None, "artifact content does not match its hash"));
        } else if !event.qualified {
            report.taken_from_record += 1;
            if extract_code(&record.content).is_some() {
                let v = Verdict::fail(UNQUALIFIED_FEEDBACK);
                report.mismatches.push(mismatch(Some(v), "recorded as unqualified but holds a code block"));
            }
        } else if !event.replayable {
            report.taken_from_record += 1;
            if record.verdict.as_ref() != Some(&event.verdict) {
                report.mismatches.push(mismatch(record.verdict.clone(), "trace and repository disagree"));
            }
        } else {
            let mut deps = Dependencies::new();
            for r in &node.requires {
                if let Some(c) = committed.get(r.as_str()) {
                    deps.insert(r.clone(), c.clone());
                }
            }
            let guard = guards
                .get(&node.node_id)
                .ok_or_else(|| ReplayError::UnknownNode(node.node_id.clone()))?;
            let v = guard.evaluate(&record.content, &ctx, &deps).map_err(|source| ReplayError::Guard {
                node: node.node_id.clone(),
                source,
            })?;
            report.reevaluated += 1;
            if v.passed != event.verdict.passed {
                report.mismatches.push(mismatch(Some(v), "verdict differs"));
            } else if v.feedback != event.verdict.feedback {
                report.feedback_drift += 1;
            }
        }

        if event.verdict.passed {
            committed.insert(&node.node_id, record.content);
            ctx = ctx.clear_feedback();
        } else {
            let feedback = if event.verdict.feedback.is_empty() {
                EMPTY_REJECTION_FEEDBACK.to_string()
            } else {
                truncate_feedback(&event.verdict.feedback)
            };
            ctx = ctx.refine(record.id, feedback);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::generator::{GenerationResult, MockGenerator, MockGeneratorSpec, MockOracleGuard};
    use crate::guards::{FnGuard, GuardRegistry, GuardSettings};
    use crate::workflow;

    fn single_node(guard: &str) -> WorkflowSpec {
        let text = format!(
            r#"{{"workflows":{{"w":{{"specification":"S","action_pairs":{{"n":{{"prompt":"p","guard":"{guard}"}}}}}}}}}}"#
        );
        workflow::parse(&text, &GuardRegistry::with_defaults(GuardSettings::default())).unwrap()
    }

    fn two_nodes() -> WorkflowSpec {
        let text = r#"{"workflows":{"w":{"specification":"S","action_pairs":{
            "a":{"prompt":"pa","guard":"mock"},
            "b":{"prompt":"pb {a_artifact}","guard":"mock","requires":["a"]}}}}}"#;
        workflow::parse(text, &GuardRegistry::with_defaults(GuardSettings::default())).unwrap()
    }

    fn guards(spec: &WorkflowSpec, g: Arc<dyn Guard>) -> IndexMap<String, Arc<dyn Guard>> {
        spec.nodes().map(|n| (n.node_id.clone(), g.clone())).collect()
    }

    struct Unqualified;
    impl Generator for Unqualified {
        fn generate(&self, _: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
            Ok(GenerationResult::from_raw("I cannot do that.", Duration::ZERO))
        }
    }

    struct Flaky {
        failures_left: Mutex<u32>,
    }
    impl Generator for Flaky {
        fn generate(&self, _: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(GenerationError::Transport("connection refused".into()));
            }
            Ok(GenerationResult::from_raw("```\nok\n```", Duration::ZERO))
        }
    }

    #[test]
    fn scripted_fail_then_pass() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::scripted([(
            "n",
            vec!["```\nbad\n```", "```\ngood\n```"],
        )]))
        .unwrap();
        let g = guards(&spec, Arc::new(MockOracleGuard::new("good")));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::Success);
        assert_eq!(out.totals.attempts, 2);
        assert_eq!(out.totals.retries, 1);
        assert_eq!(repo.len(), 2);
        let second = repo.get(&out.trace[1].artifact_id).unwrap();
        assert_eq!(second.parents, [out.trace[0].artifact_id.clone()]);
    }

    #[test]
    fn always_failing_node_uses_r_max_plus_one_attempts() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::memoryless(1.0, 0)).unwrap();
        let g = guards(&spec, Arc::new(FnGuard::always_fail("nope")));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::Failure);
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.failed_node.as_deref(), Some("n"));
        let attempts: Vec<u32> = out.trace.iter().map(|e| e.attempt).collect();
        assert_eq!(attempts, [1, 2, 3, 4]);
        assert!(out.trace.iter().all(|e| e.state_before == out.trace[0].state_before));
    }

    #[test]
    fn baseline_is_single_attempt() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::memoryless(1.0, 0)).unwrap();
        let g = guards(&spec, Arc::new(FnGuard::always_fail("nope")));
        let repo = Repository::in_memory();
        let config = RunConfig::with_mode(Mode::Baseline);
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.status, RunStatus::Failure);
    }

    #[test]
    fn unqualified_output_consumes_retries_and_halts_first_node() {
        let spec = two_nodes();
        let g = guards(&spec, Arc::new(FnGuard::always_pass()));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&Unqualified, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::Failure);
        assert_eq!(out.trace.len(), 4);
        assert!(out.trace.iter().all(|e| e.node_id == "a" && !e.qualified));
        assert!(out.trace.iter().all(|e| e.verdict.feedback == UNQUALIFIED_FEEDBACK));
    }

    #[test]
    fn empty_workflow_succeeds() {
        let text = r#"{"workflows":{"w":{"action_pairs":{}}}}"#;
        let spec = workflow::parse(text, &GuardRegistry::with_defaults(GuardSettings::default())).unwrap();
        let g = IndexMap::new();
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&Unqualified, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::Success);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn transport_failures_have_their_own_budget() {
        let spec = single_node("mock");
        let g = guards(&spec, Arc::new(FnGuard::always_pass()));
        let config = RunConfig::default();
        let repo = Repository::in_memory();
        let flaky = Flaky {
            failures_left: Mutex::new(2),
        };
        let out = Executor::new(&flaky, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::Success);
        assert_eq!(out.totals.attempts, 1);

        let repo = Repository::in_memory();
        let flaky = Flaky {
            failures_left: Mutex::new(3),
        };
        let out = Executor::new(&flaky, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::InfraAbort);
        assert_eq!(out.exit_code(), 3);
        assert!(out.error.unwrap().contains("connection refused"));
    }

    #[test]
    fn guard_infrastructure_error_aborts() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::memoryless(1.0, 0)).unwrap();
        let broken: Arc<dyn Guard> = Arc::new(FnGuard::new("broken", |_, _, _| {
            Err(GuardError::Infrastructure("python3 not found".into()))
        }));
        let g = guards(&spec, broken);
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        assert_eq!(out.status, RunStatus::InfraAbort);
        assert!(out.trace.is_empty());
        assert_eq!(repo.len(), 1);
        assert_eq!(repo.records()[0].verdict, None);
    }

    #[test]
    fn dependency_artifacts_are_parents_and_injected() {
        let spec = two_nodes();
        struct Echo(Mutex<Vec<String>>);
        impl Generator for Echo {
            fn generate(&self, r: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
                self.0.lock().unwrap().push(r.prompt.to_string());
                Ok(GenerationResult::from_raw(format!("```\nout-{}\n```", r.node_id), Duration::ZERO))
            }
        }
        let gen = Echo(Mutex::new(Vec::new()));
        let g = guards(&spec, Arc::new(FnGuard::always_pass()));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        assert!(out.is_success());
        let prompts = gen.0.into_inner().unwrap();
        assert_eq!(prompts[1], "S\n\npb out-a");
        let b = repo.get(&out.trace[1].artifact_id).unwrap();
        assert_eq!(b.parents, [out.trace[0].artifact_id.clone()]);
    }

    #[test]
    fn replay_detects_tampering_and_uses_record_for_human_events() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::scripted([(
            "n",
            vec!["```\nbad\n```", "```\ngood\n```"],
        )]))
        .unwrap();
        let g = guards(&spec, Arc::new(MockOracleGuard::new("good")));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        let report = replay(&spec, &out.trace, &repo.view(), &g).unwrap();
        assert!(report.is_faithful());
        assert_eq!(report.reevaluated, 2);

        let mut records = repo.records();
        records[1].content = "bad".into();
        let tampered = Repository::from_records(records);
        let report = replay(&spec, &out.trace, &tampered.view(), &g).unwrap();
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].attempt, 2);

        let mut human_trace = out.trace.clone();
        human_trace[0].replayable = false;
        let report = replay(&spec, &human_trace, &repo.view(), &g).unwrap();
        assert!(report.is_faithful());
        assert_eq!(report.taken_from_record, 1);

        let empty = Repository::in_memory();
        assert!(matches!(
            replay(&spec, &out.trace, &empty.view(), &g),
            Err(ReplayError::MissingArtifact(_))
        ));
    }

    #[test]
    fn trace_jsonl_round_trip_and_summary() {
        let spec = single_node("mock");
        let gen = MockGenerator::new(MockGeneratorSpec::scripted([(
            "n",
            vec!["```\nbad\n```", "```\ngood\n```"],
        )]))
        .unwrap();
        let g = guards(&spec, Arc::new(MockOracleGuard::new("good")));
        let repo = Repository::in_memory();
        let config = RunConfig::default();
        let out = Executor::new(&gen, &g, &repo, &config).execute_workflow(&spec);
        let text = trace_to_jsonl(&out.trace);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(trace_from_jsonl(&text).unwrap(), out.trace);
        let table = out.summary_table();
        assert!(table.contains("Total retries: 1"));
        assert!(table.contains("Workflow state: COMPLETE"));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("baseline".parse::<Mode>().unwrap(), Mode::Baseline);
        assert!("greedy".parse::<Mode>().is_err());
    }
}
