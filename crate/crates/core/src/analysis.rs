//! Reliability bounds, Monte Carlo checks of those bounds, and the
//! statistics used to compare baseline and guarded runs.

use std::fmt::Write as _;
use std::sync::Arc;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{Executor, Mode, RunConfig, RunOutcome, RunStatus};
use crate::generator::{MockGenerator, MockGeneratorSpec, MockOracleGuard};
use crate::guards::{Guard, GuardRegistry, GuardSettings};
use crate::repository::Repository;
use crate::workflow::{self, WorkflowSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("parameter out of range: {0}")]
    Range(String),
    #[error("cannot summarize zero trials")]
    NoTrials,
}

fn check_probability(name: &str, p: f64) -> Result<(), AnalysisError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(AnalysisError::Range(format!("{name} = {p} is not in [0, 1]")))
    }
}

/// Upper bound on the probability that a node exhausts `r_max` retries when
/// each attempt succeeds with probability at least `epsilon`.
pub fn failure_bound(epsilon: f64, r_max: u32) -> f64 {
    (1.0 - epsilon).powi(r_max as i32)
}

/// Smallest `R` with `(1 - epsilon)^R <= 1 - delta^(1/k)`, i.e. the retry
/// budget that makes a `k`-node chain succeed with probability `delta`.
pub fn min_retry_limit(delta: f64, k: u32, epsilon: f64) -> Result<u32, AnalysisError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::Range(format!("delta = {delta} is not in (0, 1)")));
    }
    if k == 0 {
        return Err(AnalysisError::Range("workflow length k must be at least 1".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(AnalysisError::Range(format!("epsilon = {epsilon} is not in (0, 1]")));
    }
    if epsilon == 1.0 {
        return Ok(0);
    }
    let target = 1.0 - delta.powf(1.0 / k as f64);
    let holds = |r: u32| failure_bound(epsilon, r) <= target;
    let mut r = (target.ln() / (1.0 - epsilon).ln()).ceil().max(0.0) as u32;
    while r > 0 && holds(r - 1) {
        r -= 1;
    }
    while !holds(r) {
        r += 1;
    }
    Ok(r)
}

/// Worst-case number of failed guard evaluations over `n_guards` nodes.
pub fn tree_size_bound(n_guards: u64, r_max: u64) -> u64 {
    n_guards * r_max
}

/// Control-complexity budget `|S_reach| * R_max * |G|`.
pub fn control_complexity_budget(reachable_states: u64, r_max: u64, n_guards: u64) -> u64 {
    reachable_states * r_max * n_guards
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    table.push(0.0);
    for i in 1..=n {
        table.push(table[i as usize - 1] + (i as f64).ln());
    }
    table
}

/// Two-sided Fisher exact test for `a` successes out of `n` against `b`
/// successes out of `m`: the total probability of all tables with the same
/// margins that are no more likely than the observed one.
pub fn fisher_exact(a: u64, n: u64, b: u64, m: u64) -> Result<f64, AnalysisError> {
    if a > n || b > m {
        return Err(AnalysisError::Range(format!("counts {a}/{n} vs {b}/{m} are inconsistent")));
    }
    let total = n + m;
    let successes = a + b;
    let lf = ln_factorials(total);
    let ln_choose = |x: u64, y: u64| lf[x as usize] - lf[y as usize] - lf[(x - y) as usize];
    let denom = ln_choose(total, successes);
    let prob = |x: u64| (ln_choose(n, x) + ln_choose(m, successes - x) - denom).exp();
    let lo = successes.saturating_sub(m);
    let hi = successes.min(n);
    let observed = prob(a);
    let cutoff = observed * (1.0 + 1e-7);
    let probs: Vec<f64> = (lo..=hi).map(prob).collect();
    let all: f64 = probs.iter().sum();
    let tail: f64 = probs.iter().filter(|&&q| q <= cutoff).sum();
    Ok((tail / all).min(1.0))
}

/// Cohen's h effect size between two proportions, as an absolute value.
pub fn cohens_h(p1: f64, p2: f64) -> Result<f64, AnalysisError> {
    check_probability("p1", p1)?;
    check_probability("p2", p2)?;
    Ok((2.0 * p2.sqrt().asin() - 2.0 * p1.sqrt().asin()).abs())
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// How the simulated generator's success probability evolves over retries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimulationMode {
    Memoryless,
    Improving { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub epsilon: f64,
    pub r_max: u32,
    /// Target workflow reliability.
    pub delta: f64,
    /// Workflow length.
    pub k: u32,
    pub n_guards: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub params: BoundParams,
    pub mode: SimulationMode,
    pub workflows: u64,
    pub successful_workflows: u64,
    pub node_executions: u64,
    pub failed_nodes: u64,
    pub total_attempts: u64,
    pub empirical_node_failure: f64,
    pub empirical_workflow_success: f64,
    pub analytic_node_bound: f64,
    /// Three binomial standard deviations at the analytic bound.
    pub tolerance: f64,
    pub bound_holds: bool,
}

/// A `k`-node chain of mock-guarded nodes, `n1 <- n2 <- ... <- nk`.
pub fn chain_workflow(k: u32) -> WorkflowSpec {
    let nodes: Vec<String> = (1..=k)
        .map(|i| {
            let requires = if i == 1 { String::new() } else { format!(r#","requires":["n{}"]"#, i - 1) };
            format!(r#""n{i}":{{"prompt":"step {i}","guard":"mock"{requires}}}"#)
        })
        .collect();
    let text = format!(
        r#"{{"version":"1.0","workflows":{{"chain{k}":{{"name":"chain","specification":"simulated","action_pairs":{{{}}}}}}}}}"#,
        nodes.join(",")
    );
    let registry = GuardRegistry::with_defaults(GuardSettings::default());
    workflow::parse(&text, &registry).expect("generated chain is valid")
}

/// Seed for trial `index` of a run seeded with `seed`.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Run `workflows` independent `k`-node chains through the executor with a
/// seeded mock generator and compare the empirical node failure rate with
/// the analytic bound.
pub fn monte_carlo_validate(
    params: BoundParams,
    mode: SimulationMode,
    workflows: u64,
    seed: u64,
) -> Result<MonteCarloReport, AnalysisError> {
    if workflows < 1000 {
        return Err(AnalysisError::Range(format!("{workflows} trials is below the minimum of 1000")));
    }
    let base_spec = match mode {
        SimulationMode::Memoryless => MockGeneratorSpec::memoryless(params.epsilon, seed),
        SimulationMode::Improving { delta } => MockGeneratorSpec::improving(params.epsilon, delta, seed),
    };
    base_spec
        .validate()
        .map_err(|e| AnalysisError::Range(e.to_string()))?;
    let spec = chain_workflow(params.k.max(1));
    let oracle: Arc<dyn Guard> = Arc::new(MockOracleGuard::new(base_spec.pass_artifact.clone()));
    let guards: IndexMap<String, Arc<dyn Guard>> = spec.nodes().map(|n| (n.node_id.clone(), oracle.clone())).collect();
    let config = RunConfig {
        r_max: params.r_max,
        ..RunConfig::with_mode(Mode::Guarded)
    };

    let outcomes: Vec<RunOutcome> = (0..workflows)
        .into_par_iter()
        .map(|i| {
            let generator = MockGenerator::new(base_spec.with_seed(trial_seed(seed, i))).expect("validated above");
            let repo = Repository::in_memory();
            Executor::new(&generator, &guards, &repo, &config).execute_workflow(&spec)
        })
        .collect();

    let mut report = MonteCarloReport {
        params,
        mode,
        workflows,
        successful_workflows: 0,
        node_executions: 0,
        failed_nodes: 0,
        total_attempts: 0,
        empirical_node_failure: 0.0,
        empirical_workflow_success: 0.0,
        analytic_node_bound: failure_bound(params.epsilon, params.r_max),
        tolerance: 0.0,
        bound_holds: false,
    };
    for o in &outcomes {
        let summaries = o.node_summaries();
        report.node_executions += summaries.len() as u64;
        report.total_attempts += o.totals.attempts as u64;
        match o.status {
            RunStatus::Success => report.successful_workflows += 1,
            _ => report.failed_nodes += 1,
        }
    }
    let n = report.node_executions as f64;
    let b = report.analytic_node_bound;
    report.empirical_node_failure = report.failed_nodes as f64 / n;
    report.empirical_workflow_success = report.successful_workflows as f64 / workflows as f64;
    report.tolerance = 3.0 * (b * (1.0 - b) / n).sqrt();
    report.bound_holds = report.empirical_node_failure <= b + report.tolerance;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub task_id: String,
    pub model_id: String,
    pub mode: Mode,
    pub trials: u64,
    pub successes: u64,
    pub infra_aborts: u64,
    pub avg_attempts: f64,
    pub avg_retries: f64,
    /// Wall-clock total; excluded from serialized reports so that seeded
    /// campaigns reproduce byte for byte.
    #[serde(skip)]
    pub wall_ms: u64,
}

impl TrialSummary {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Per-trial facts needed for a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub status: RunStatus,
    pub attempts: u32,
    pub retries: u32,
    pub wall_ms: u64,
}

impl From<&RunOutcome> for TrialResult {
    fn from(o: &RunOutcome) -> Self {
        Self {
            status: o.status,
            attempts: o.totals.attempts,
            retries: o.totals.retries,
            wall_ms: o.totals.wall_ms,
        }
    }
}

pub fn summarize(
    task_id: &str,
    model_id: &str,
    mode: Mode,
    results: &[TrialResult],
) -> Result<TrialSummary, AnalysisError> {
    if results.is_empty() {
        return Err(AnalysisError::NoTrials);
    }
    let trials = results.len() as u64;
    let count = |f: fn(&TrialResult) -> bool| results.iter().filter(|r| f(r)).count() as u64;
    Ok(TrialSummary {
        task_id: task_id.to_string(),
        model_id: model_id.to_string(),
        mode,
        trials,
        successes: count(|r| r.status == RunStatus::Success),
        infra_aborts: count(|r| r.status == RunStatus::InfraAbort),
        avg_attempts: results.iter().map(|r| r.attempts as f64).sum::<f64>() / trials as f64,
        avg_retries: results.iter().map(|r| r.retries as f64).sum::<f64>() / trials as f64,
        wall_ms: results.iter().map(|r| r.wall_ms).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub base_rate: f64,
    pub guarded_rate: f64,
    /// Guarded minus baseline success rate, in percentage points.
    pub gain_pp: f64,
    pub fisher_p: f64,
    pub cohens_h: f64,
    /// +1 when guarded beats baseline, -1 when it is worse, 0 on a tie.
    pub direction: i8,
    /// Guarded generation calls per baseline generation call.
    pub cost_multiplier: f64,
    pub gain_per_multiplier: f64,
    pub significance: String,
}

pub fn compare(base: &TrialSummary, guarded: &TrialSummary) -> Result<ComparisonStats, AnalysisError> {
    if base.trials == 0 || guarded.trials == 0 {
        return Err(AnalysisError::NoTrials);
    }
    let base_rate = base.success_rate();
    let guarded_rate = guarded.success_rate();
    let gain_pp = 100.0 * (guarded_rate - base_rate);
    let fisher_p = fisher_exact(base.successes, base.trials, guarded.successes, guarded.trials)?;
    let cost_multiplier = if base.avg_attempts > 0.0 {
        guarded.avg_attempts / base.avg_attempts
    } else {
        guarded.avg_attempts
    };
    Ok(ComparisonStats {
        base_rate,
        guarded_rate,
        gain_pp,
        fisher_p,
        cohens_h: cohens_h(base_rate, guarded_rate)?,
        direction: match guarded.successes * base.trials {
            x if x > base.successes * guarded.trials => 1,
            x if x < base.successes * guarded.trials => -1,
            _ => 0,
        },
        cost_multiplier,
        gain_per_multiplier: if cost_multiplier > 0.0 { gain_pp / cost_multiplier } else { 0.0 },
        significance: significance_stars(fisher_p).to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub workflow_id: String,
    pub model_id: String,
    pub baseline: TrialSummary,
    pub guarded: TrialSummary,
    pub comparison: ComparisonStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub trials: u64,
    pub r_max: u32,
    pub cells: Vec<CellReport>,
    /// Cells run in only one mode, which have nothing to compare against.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpaired: Vec<TrialSummary>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `Task | Model | Base | Guarded | Gain | Avg Retries`, with
    /// significance stars on the gain.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "Task".to_string(),
            "Model".to_string(),
            "Base".to_string(),
            "Guarded".to_string(),
            "Gain".to_string(),
            "Avg Retries".to_string(),
        ]];
        for c in &self.cells {
            rows.push([
                c.workflow_id.clone(),
                c.model_id.clone(),
                format!("{:.0}%", 100.0 * c.comparison.base_rate),
                format!("{:.0}%", 100.0 * c.comparison.guarded_rate),
                format!("{:+.0}{}", c.comparison.gain_pp, c.comparison.significance),
                format!("{:.2}", c.guarded.avg_retries),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap())
            .collect();
        let mut out = String::new();
        for (n, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i < 2 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if n == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("-+-"));
            }
        }
        for u in &self.unpaired {
            let _ = writeln!(
                out,
                "{} | {} | {} only: {}/{} successes, avg retries {:.2}",
                u.task_id, u.model_id, u.mode, u.successes, u.trials, u.avg_retries
            );
        }
        let _ = writeln!(out, "\nsignificance (Fisher exact, two-sided): * p<0.05, ** p<0.01, *** p<0.001");
        out
    }
}
