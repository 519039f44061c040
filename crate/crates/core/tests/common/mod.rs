#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use dualstate::executor::{Executor, RunConfig, RunOutcome};
use dualstate::generator::{
    GenerationError, GenerationRequest, GenerationResult, Generator, MockGenerator, MockGeneratorSpec, MockOracleGuard,
};
use dualstate::guards::{
    CompositeGuard, Dependencies, FnGuard, Guard, GuardError, GuardRegistry, GuardSettings, ImportBoundaryGuard,
    ParallelGuard, PreCommitGuard, Verdict, DEFAULT_DENIED_MODULES,
};
use dualstate::repository::Repository;
use dualstate::state::{project, AmbientEnvironment, Context, GuardId, WorkflowState};
use dualstate::workflow::{self, WorkflowSpec};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TDD_STACK: &str = include_str!("../../../../workflows/tdd_stack.json");

pub const STACK_TESTS: &str = "\
import pytest
from stack import Stack

def test_push_pop():
    s = Stack()
    s.push(1)
    assert s.pop() == 1

def test_pop_empty():
    s = Stack()
    with pytest.raises(IndexError):
        s.pop()";

pub const STACK_BUGGY: &str = "\
class Stack:
    def __init__(self):
        self._items = []

    def push(self, item):
        self._items.append(item)

    def pop(self):
        return self._items.pop()";

pub const STACK_FIXED: &str = "\
class Stack:
    def __init__(self):
        self._items = []

    def push(self, item):
        self._items.append(item)

    def pop(self):
        if not self._items:
            raise IndexError(\"pop from empty stack\")
        return self._items.pop()";

pub const POP_FEEDBACK: &str = "IndexError: pop from empty list";

pub fn fenced(code: &str) -> String {
    format!("```python\n{code}\n```")
}

/// Wraps a generator and keeps every prompt it was sent.
pub struct Recording<G> {
    pub inner: G,
    pub prompts: Mutex<Vec<(String, u32, String)>>,
}

impl<G: Generator> Recording<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompt(&self, node: &str, attempt: u32) -> Option<String> {
        self.prompts
            .lock()
            .unwrap()
            .iter()
            .find(|(n, a, _)| n == node && *a == attempt)
            .map(|(_, _, p)| p.clone())
    }
}

impl<G: Generator> Generator for Recording<G> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
        self.prompts
            .lock()
            .unwrap()
            .push((request.node_id.to_string(), request.attempt, request.prompt.to_string()));
        self.inner.generate(request)
    }
}

/// Registry whose sandbox-backed guards are replaced by deterministic doubles.
pub fn stubbed_registry() -> GuardRegistry {
    let mut registry = GuardRegistry::with_defaults(GuardSettings::default());
    registry.register_guard(
        "syntax",
        Arc::new(FnGuard::new("syntax", |artifact, _, _| {
            Ok(if artifact.trim().is_empty() { Verdict::fail("SyntaxError: empty module") } else { Verdict::pass() })
        })),
    );
    registry.register_guard(
        "dynamic_test",
        Arc::new(FnGuard::new("dynamic_test", |artifact, _, deps| {
            let tests = deps.first().map(|(_, t)| t).unwrap_or_default();
            Ok(if tests.contains("test_pop_empty") && !artifact.contains("if not self._items") {
                Verdict::fail(format!("FAILED test_pop_empty\n{POP_FEEDBACK}"))
            } else {
                Verdict::pass()
            })
        })),
    );
    registry
}

pub struct GoldenRun {
    pub spec: WorkflowSpec,
    pub outcome: RunOutcome,
    pub generator: Recording<MockGenerator>,
    pub repository: Repository,
}

/// The test-driven stack workflow with a scripted generator: the first
/// implementation forgets the empty-stack check.
pub fn golden_run() -> GoldenRun {
    let registry = stubbed_registry();
    let spec = workflow::parse(TDD_STACK, &registry).expect("fixture parses");
    let guards = spec.build_guards(&registry).expect("guards build");
    let script = MockGeneratorSpec::scripted([
        ("g_test", vec![fenced(STACK_TESTS)]),
        ("g_impl", vec![fenced(STACK_BUGGY), fenced(STACK_FIXED)]),
    ]);
    let generator = Recording::new(MockGenerator::new(script).unwrap());
    let repository = Repository::in_memory();
    let config = RunConfig::default();
    let outcome = Executor::new(&generator, &guards, &repository, &config).execute_workflow(&spec);
    GoldenRun {
        spec,
        outcome,
        generator,
        repository,
    }
}

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gid(s: &str) -> GuardId {
    GuardId::new(s).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> WorkflowState {
    WorkflowState::from_assignment((0..n).map(|i| (gid(&format!("g{i}")), rng.gen_bool(0.5)))).unwrap()
}

/// A failing verdict leaves the state unchanged; a passing one sets only its
/// own guard. Transitions are idempotent.
pub fn transition_stability(states: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..states {
        let n = rng.gen_range(1..=12);
        let s = random_state(&mut rng, n);
        let target = gid(&format!("g{}", rng.gen_range(0..n)));
        let value = rng.gen_bool(0.5);
        let next = s.transition(&target, value).map_err(|e| e.to_string())?;
        let want = s.get(&target).unwrap() || value;
        ensure(next.get(&target) == Some(want), || format!("{target}: {:?} -> {:?}", s.get(&target), next.get(&target)))?;
        ensure(value || next == s, || "failing verdict changed the state".into())?;
        for (g, v) in s.iter() {
            if *g != target {
                ensure(next.get(g) == Some(v), || format!("transition on {target} changed {g}"))?;
            }
        }
        ensure(next.transition(&target, value).unwrap() == next, || "transition not idempotent".into())?;
        ensure(s.transition(&gid("absent"), true).is_err(), || "unknown guard accepted".into())?;
    }
    Ok(format!("{states} random states"))
}

fn random_artifact(rng: &mut ChaCha8Rng) -> String {
    const LINES: &[&str] = &[
        "import os",
        "import requests",
        "from sqlalchemy import orm",
        "def f(x):\n    return x + 1",
        "API_KEY = 'sk-abcdefghijklmnopqrstuvwxyz123456'",
        "class Stack:\n    pass",
        "# mock artifact: pass\nresult = True",
        "print('hi')",
        "x = [i for i in range(10)]",
    ];
    (0..rng.gen_range(0..6)).map(|_| *LINES.choose(rng).unwrap()).collect::<Vec<_>>().join("\n")
}

/// Evaluating the same artifact repeatedly projects to the same state.
pub fn projection_determinism(artifacts: usize, evaluations: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imports = ImportBoundaryGuard::new(DEFAULT_DENIED_MODULES.iter().map(|s| s.to_string()));
    let secrets = PreCommitGuard::secrets_only();
    let mock = MockOracleGuard::default();
    let nonempty = FnGuard::new("nonempty", |a, _, _| Ok(if a.is_empty() { Verdict::fail("empty") } else { Verdict::pass() }));
    let guards: Vec<(GuardId, &dyn Guard)> = vec![
        (gid("imports"), &imports),
        (gid("secrets"), &secrets),
        (gid("mock"), &mock),
        (gid("nonempty"), &nonempty),
    ];
    let ctx = Context::new(AmbientEnvironment::default(), "spec");
    let deps = Dependencies::new();
    for _ in 0..artifacts {
        let artifact = random_artifact(&mut rng);
        let first = project(&artifact, &ctx, &deps, &guards).map_err(|e| e.to_string())?;
        for _ in 1..evaluations {
            let again = project(&artifact, &ctx, &deps, &guards).map_err(|e| e.to_string())?;
            ensure(again == first, || format!("projection of {artifact:?} changed"))?;
        }
    }
    Ok(format!("{artifacts} artifacts x {evaluations} evaluations"))
}

/// A random DAG over `n` nodes: node `i` may require any node `j < i`.
pub fn random_dag_workflow(rng: &mut ChaCha8Rng, n: usize) -> WorkflowSpec {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs = Vec::new();
    for &i in &order {
        let requires: Vec<String> = (0..i).filter(|_| rng.gen_bool(0.4)).map(|j| format!("\"n{j}\"")).collect();
        pairs.push(format!(r#""n{i}":{{"prompt":"p{i}","guard":"mock","requires":[{}]}}"#, requires.join(",")));
    }
    dag_doc(&pairs)
}

fn dag_doc(pairs: &[String]) -> WorkflowSpec {
    let text = format!(
        r#"{{"version":"1.0","workflows":{{"w":{{"name":"W","specification":"S","action_pairs":{{{}}}}}}}}}"#,
        pairs.join(",")
    );
    workflow::parse(&text, &GuardRegistry::with_defaults(GuardSettings::default())).expect("generated DAG is valid")
}

fn mock_guards(spec: &WorkflowSpec) -> IndexMap<String, Arc<dyn Guard>> {
    let g: Arc<dyn Guard> = Arc::new(MockOracleGuard::default());
    spec.nodes().map(|n| (n.node_id.clone(), g.clone())).collect()
}

/// Executes random workflows and checks that satisfied guards never revert
/// and that no node exceeds its attempt budget.
pub fn execution_invariants(runs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = 0usize;
    for run in 0..runs {
        let n = rng.gen_range(1..=6);
        let spec = random_dag_workflow(&mut rng, n);
        let guards = mock_guards(&spec);
        let epsilon = rng.gen_range(0.05..=1.0);
        let r_max = rng.gen_range(0..=5);
        let generator = MockGenerator::new(MockGeneratorSpec::memoryless(epsilon, rng.gen())).unwrap();
        let repo = Repository::in_memory();
        let config = RunConfig {
            r_max,
            ..RunConfig::default()
        };
        let outcome = Executor::new(&generator, &guards, &repo, &config).execute_workflow(&spec);
        events += outcome.trace.len();
        let mut states: Vec<&WorkflowState> = outcome.trace.iter().map(|e| &e.state_before).collect();
        states.push(&outcome.final_state);
        for w in states.windows(2) {
            for (g, v) in w[0].iter() {
                ensure(!v || w[1].get(g) == Some(true), || format!("run {run}: guard {g} reverted"))?;
            }
        }
        for s in outcome.node_summaries() {
            ensure(s.attempts <= r_max + 1, || {
                format!("run {run}: node {} used {} attempts with R={r_max}", s.node_id, s.attempts)
            })?;
        }
        ensure(repo.len() == outcome.trace.len(), || format!("run {run}: repository and trace lengths differ"))?;
    }
    Ok(format!("{runs} random workflows, {events} attempts"))
}

/// Appends never alter earlier records; any single-byte change to a stored
/// record is detected.
pub fn repository_tamper(records: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let repo = Repository::in_memory();
    let mut ids: Vec<dualstate::repository::ArtifactId> = Vec::new();
    for i in 0..records {
        let before = repo.records();
        let parents = if ids.is_empty() || rng.gen_bool(0.3) {
            Vec::new()
        } else {
            vec![ids[rng.gen_range(0..ids.len())].clone()]
        };
        let verdict = if rng.gen_bool(0.5) { Some(Verdict::pass()) } else { Some(Verdict::fail(format!("e{i}"))) };
        let rec = repo
            .append(random_artifact(&mut rng), parents, format!("n{}", i % 3), 1 + (i as u32 % 4), verdict)
            .map_err(|e| e.to_string())?;
        ids.push(rec.id);
        ensure(repo.records()[..before.len()] == before[..], || "append rewrote history".into())?;
    }
    ensure(repo.verify_chain(), || "untampered chain rejected".into())?;
    let clean = repo.records();
    let mut detected = 0;
    for i in 0..clean.len() {
        let mut records = clean.clone();
        let r = &mut records[i];
        match rng.gen_range(0..4) {
            0 => r.content.push('x'),
            1 => r.attempt += 1,
            2 => r.node_id.push('x'),
            _ => {
                r.verdict = match r.verdict.take() {
                    Some(v) => Some(Verdict { passed: !v.passed, ..v }),
                    None => Some(Verdict::pass()),
                }
            }
        }
        if !Repository::from_records(records).verify_chain() {
            detected += 1;
        }
    }
    ensure(detected == clean.len(), || format!("{detected}/{} tampered logs detected", clean.len()))?;
    Ok(format!("{records} appends, {detected} tamperings detected"))
}

struct Counting {
    pass: bool,
    calls: AtomicUsize,
}

impl Guard for Counting {
    fn type_name(&self) -> &str {
        "counting"
    }

    fn evaluate(&self, _: &str, _: &Context, _: &Dependencies) -> Result<Verdict, GuardError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(if self.pass { Verdict::pass() } else { Verdict::fail("stub failed") })
    }
}

fn stubs(pattern: &[bool]) -> Vec<Arc<Counting>> {
    pattern
        .iter()
        .map(|&pass| {
            Arc::new(Counting {
                pass,
                calls: AtomicUsize::new(0),
            })
        })
        .collect()
}

fn members(stubs: &[Arc<Counting>]) -> Vec<Arc<dyn Guard>> {
    stubs.iter().map(|s| s.clone() as Arc<dyn Guard>).collect()
}

/// Composite evaluation stops at the first failure; parallel evaluation
/// equals the conjunction of its members. All 2^4 outcome patterns.
pub fn combinator_semantics() -> Check {
    let ctx = Context::new(AmbientEnvironment::default(), "spec");
    let deps = Dependencies::new();
    for mask in 0u32..16 {
        let pattern: Vec<bool> = (0..4).map(|i| mask & (1 << i) != 0).collect();
        let expected = pattern.iter().all(|&p| p);
        let first_fail = pattern.iter().position(|&p| !p);

        let s = stubs(&pattern);
        let composite = CompositeGuard::new(members(&s)).unwrap();
        let v = composite.evaluate("a", &ctx, &deps).map_err(|e| e.to_string())?;
        ensure(v.passed == expected, || format!("composite {pattern:?} gave {}", v.passed))?;
        for (i, stub) in s.iter().enumerate() {
            let want = match first_fail {
                Some(f) => usize::from(i <= f),
                None => 1,
            };
            let got = stub.calls.load(Ordering::SeqCst);
            ensure(got == want, || format!("composite {pattern:?}: member {i} evaluated {got} times"))?;
        }

        for workers in 1..=4 {
            let s = stubs(&pattern);
            let parallel = ParallelGuard::new(members(&s), workers).unwrap();
            let v = parallel.evaluate("a", &ctx, &deps).map_err(|e| e.to_string())?;
            ensure(v.passed == expected, || format!("parallel {pattern:?} gave {}", v.passed))?;
            let failures = pattern.iter().filter(|&&p| !p).count();
            ensure(v.feedback.matches("stub failed").count() == failures, || "parallel feedback incomplete".into())?;
            ensure(s.iter().all(|c| c.calls.load(Ordering::SeqCst) == 1), || "parallel skipped a member".into())?;
        }
    }
    Ok("16 patterns".into())
}

/// `ready_nodes` against a direct oracle, for every DAG on up to `max_n`
/// nodes (edges from higher to lower index, declared in a shuffled order)
/// and every state.
pub fn ready_nodes_exhaustive(max_n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dags = 0usize;
    let mut checks = 0usize;
    for n in 1..=max_n {
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
        for mask in 0u64..(1 << edges.len()) {
            let requires: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    edges
                        .iter()
                        .enumerate()
                        .filter(|(k, (a, _))| *a == i && mask & (1 << k) != 0)
                        .map(|(_, (_, b))| *b)
                        .collect()
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pairs: Vec<String> = order
                .iter()
                .map(|&i| {
                    let r: Vec<String> = requires[i].iter().map(|j| format!("\"n{j}\"")).collect();
                    format!(r#""n{i}":{{"prompt":"p","guard":"mock","requires":[{}]}}"#, r.join(","))
                })
                .collect();
            let spec = dag_doc(&pairs);
            dags += 1;
            for bits in 0u32..(1 << n) {
                let sat = |i: usize| bits & (1 << i) != 0;
                let state = WorkflowState::from_assignment((0..n).map(|i| (gid(&format!("n{i}")), sat(i)))).unwrap();
                let oracle: BTreeSet<String> = (0..n)
                    .filter(|&i| !sat(i) && requires[i].iter().all(|&j| sat(j)))
                    .map(|i| format!("n{i}"))
                    .collect();
                let got: Vec<&str> = spec.ready_nodes(&state);
                let got_set: BTreeSet<String> = got.iter().map(|s| s.to_string()).collect();
                ensure(got.len() == got_set.len() && got_set == oracle, || {
                    format!("dag {mask:#b} on {n} nodes, state {bits:#b}: got {got:?}, want {oracle:?}")
                })?;
                checks += 1;
            }
        }
    }
    Ok(format!("{dags} DAGs, {checks} states"))
}
