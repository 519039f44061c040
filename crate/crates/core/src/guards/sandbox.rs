//! Guards that execute untrusted code through the sandbox shim.
//!
//! The shim is a one-shot process: it reads a single JSON [`ShimRequest`]
//! from stdin, writes a single JSON [`ShimResponse`] to stdout and exits
//! with 0 (protocol success, whatever the verdict), 2 (request rejected) or
//! 3 (internal crash). Generated code never runs inside the engine.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::process::run_with_timeout;
use super::{tail, timeout_feedback, Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

/// Environment variable holding the shim command line (whitespace split).
pub const SHIM_ENV: &str = "DUALSTATE_SHIM";
pub const DEFAULT_SHIM_COMMAND: &str = "dualstate-shim";

// Supervision slack on top of the shim's own timeout.
const SHIM_GRACE: Duration = Duration::from_secs(2);
const RUNNER_OUTPUT_BYTES: usize = 6 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShimAction {
    Parse,
    RunTests,
    RunTestsWithCoverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageFractions {
    pub line: f64,
    pub branch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShimRequest {
    pub action: ShimAction,
    pub implementation: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tests: Option<String>,
    pub timeout_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage_thresholds: Option<CoverageFractions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShimVerdict {
    Passed,
    Failed,
    Timeout,
    ParseError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimFailure {
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShimResponse {
    pub ok: bool,
    pub verdict: ShimVerdict,
    #[serde(default)]
    pub failures: Vec<ShimFailure>,
    #[serde(default)]
    pub coverage: Option<CoverageFractions>,
    #[serde(default)]
    pub stderr_tail: String,
    #[serde(default)]
    pub duration_ms: u64,
}

impl ShimResponse {
    /// Failures and stderr tail rendered as a runner would print them.
    pub fn runner_output(&self) -> String {
        let mut out = String::new();
        for f in &self.failures {
            out.push_str(&format!("FAILED {}\n{}\n", f.name, f.message));
        }
        if !self.stderr_tail.is_empty() {
            out.push_str(&self.stderr_tail);
        }
        tail(out.trim_end(), RUNNER_OUTPUT_BYTES).to_string()
    }
}

/// Invokes the shim process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShimClient {
    command: Vec<String>,
}

impl Default for ShimClient {
    fn default() -> Self {
        Self::from_env()
    }
}

impl ShimClient {
    pub fn new(command: Vec<String>) -> Self {
        Self { command }
    }

    /// `$DUALSTATE_SHIM` if set, else `dualstate-shim` on `PATH`.
    pub fn from_env() -> Self {
        let command = std::env::var(SHIM_ENV)
            .ok()
            .map(|v| v.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| vec![DEFAULT_SHIM_COMMAND.to_string()]);
        Self { command }
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn call(&self, request: &ShimRequest) -> Result<ShimResponse, GuardError> {
        let payload = serde_json::to_vec(request).expect("shim request serializes");
        let limit = Duration::from_secs_f64(request.timeout_seconds.max(0.0)) + SHIM_GRACE;
        let out = run_with_timeout(&self.command, Some(&payload), None, limit).map_err(|e| {
            GuardError::Infrastructure(format!("sandbox shim `{}` unavailable: {e}", self.command.join(" ")))
        })?;
        if out.timed_out {
            // the shim failed to enforce its own deadline; treat as a timeout verdict
            return Ok(ShimResponse {
                ok: true,
                verdict: ShimVerdict::Timeout,
                failures: Vec::new(),
                coverage: None,
                stderr_tail: tail(&out.stderr, RUNNER_OUTPUT_BYTES).to_string(),
                duration_ms: out.duration.as_millis() as u64,
            });
        }
        match out.code {
            Some(0) => serde_json::from_str(out.stdout.trim()).map_err(|e| {
                GuardError::Infrastructure(format!("malformed shim response: {e}"))
            }),
            Some(2) => Err(GuardError::Infrastructure(format!(
                "shim rejected request: {}",
                out.combined().trim()
            ))),
            Some(3) => Err(GuardError::Infrastructure(format!(
                "shim crashed: {}",
                tail(out.combined().trim(), RUNNER_OUTPUT_BYTES)
            ))),
            code => Err(GuardError::Infrastructure(format!(
                "shim exited with {code:?}: {}",
                tail(out.combined().trim(), RUNNER_OUTPUT_BYTES)
            ))),
        }
    }
}

fn parse_error_feedback(resp: &ShimResponse) -> String {
    resp.failures
        .first()
        .map(|f| f.message.clone())
        .unwrap_or_else(|| "syntax error".to_string())
}

/// The artifact parses in the artifact language.
#[derive(Debug, Clone)]
pub struct SyntaxGuard {
    shim: ShimClient,
    timeout: Duration,
}

impl SyntaxGuard {
    pub fn new(shim: ShimClient, timeout: Duration) -> Self {
        Self { shim, timeout }
    }
}

impl Guard for SyntaxGuard {
    fn type_name(&self) -> &str {
        "syntax"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        let resp = self.shim.call(&ShimRequest {
            action: ShimAction::Parse,
            implementation: artifact.to_string(),
            tests: None,
            timeout_seconds: self.timeout.as_secs_f64(),
            coverage_thresholds: None,
        })?;
        Ok(match resp.verdict {
            ShimVerdict::Passed => Verdict::pass(),
            ShimVerdict::ParseError => Verdict::fail(parse_error_feedback(&resp)),
            ShimVerdict::Timeout => Verdict::fail(timeout_feedback(self.timeout)),
            ShimVerdict::Failed => Verdict::fail(resp.runner_output()),
        })
    }
}

/// Generated tests pass against the artifact.
#[derive(Debug, Clone)]
pub struct DynamicTestGuard {
    shim: ShimClient,
    timeout: Duration,
    tests_from: Option<String>,
}

impl DynamicTestGuard {
    /// `tests_from` names the dependency holding the tests; defaults to the
    /// first dependency.
    pub fn new(shim: ShimClient, timeout: Duration, tests_from: Option<String>) -> Self {
        Self {
            shim,
            timeout,
            tests_from,
        }
    }
}

impl Guard for DynamicTestGuard {
    fn type_name(&self) -> &str {
        "dynamic_test"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        let tests = deps.resolve(self.tests_from.as_deref(), "tests")?;
        let resp = self.shim.call(&ShimRequest {
            action: ShimAction::RunTests,
            implementation: artifact.to_string(),
            tests: Some(tests.to_string()),
            timeout_seconds: self.timeout.as_secs_f64(),
            coverage_thresholds: None,
        })?;
        Ok(match resp.verdict {
            ShimVerdict::Passed => Verdict::pass(),
            ShimVerdict::Timeout => Verdict::fail(timeout_feedback(self.timeout)),
            ShimVerdict::ParseError => Verdict::fail(parse_error_feedback(&resp)),
            ShimVerdict::Failed => {
                let mut feedback = match resp.failures.first() {
                    Some(f) => format!("Test failed: {}\n{}", f.name, f.message),
                    None => "Test failed".to_string(),
                };
                let tail_text = resp.stderr_tail.trim_end();
                if !tail_text.is_empty() && !feedback.contains(tail_text) {
                    feedback.push('\n');
                    feedback.push_str(tail_text);
                }
                Verdict::fail(feedback)
            }
        })
    }
}

/// Candidate tests must pass against the unmodified legacy code.
/// A failure blames the tests.
#[derive(Debug, Clone)]
pub struct CharacterizationGuard {
    shim: ShimClient,
    timeout: Duration,
    legacy_from: Option<String>,
}

impl CharacterizationGuard {
    pub fn new(shim: ShimClient, timeout: Duration, legacy_from: Option<String>) -> Self {
        Self {
            shim,
            timeout,
            legacy_from,
        }
    }
}

impl Guard for CharacterizationGuard {
    fn type_name(&self) -> &str {
        "characterization"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        let legacy = deps.resolve(self.legacy_from.as_deref(), "legacy")?;
        let resp = self.shim.call(&ShimRequest {
            action: ShimAction::RunTests,
            implementation: legacy.to_string(),
            tests: Some(artifact.to_string()),
            timeout_seconds: self.timeout.as_secs_f64(),
            coverage_thresholds: None,
        })?;
        Ok(match resp.verdict {
            ShimVerdict::Passed => Verdict::pass(),
            ShimVerdict::Timeout => Verdict::fail(timeout_feedback(self.timeout)),
            ShimVerdict::Failed | ShimVerdict::ParseError => Verdict::fail(format!(
                "Tests failed against legacy code. The TEST is incorrect.\n{}",
                resp.runner_output()
            )),
        })
    }
}

/// Tests reach line and branch coverage thresholds on the
/// implementation. Only coverage is judged here; test outcomes belong to
/// the test guards.
#[derive(Debug, Clone)]
pub struct CoverageGuard {
    shim: ShimClient,
    timeout: Duration,
    line_threshold: f64,
    branch_threshold: f64,
    implementation_from: Option<String>,
}

impl CoverageGuard {
    pub const DEFAULT_LINE_THRESHOLD: f64 = 0.8;
    pub const DEFAULT_BRANCH_THRESHOLD: f64 = 0.7;

    pub fn new(
        shim: ShimClient,
        timeout: Duration,
        line_threshold: f64,
        branch_threshold: f64,
        implementation_from: Option<String>,
    ) -> Result<Self, GuardError> {
        for (name, t) in [("line", line_threshold), ("branch", branch_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(GuardError::Misconfigured(format!(
                    "{name} coverage threshold {t} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            shim,
            timeout,
            line_threshold,
            branch_threshold,
            implementation_from,
        })
    }

    pub fn thresholds(&self) -> (f64, f64) {
        (self.line_threshold, self.branch_threshold)
    }
}

impl Guard for CoverageGuard {
    fn type_name(&self) -> &str {
        "coverage"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        let implementation = deps.resolve(self.implementation_from.as_deref(), "implementation")?;
        let resp = self.shim.call(&ShimRequest {
            action: ShimAction::RunTestsWithCoverage,
            implementation: implementation.to_string(),
            tests: Some(artifact.to_string()),
            timeout_seconds: self.timeout.as_secs_f64(),
            coverage_thresholds: Some(CoverageFractions {
                line: self.line_threshold,
                branch: self.branch_threshold,
            }),
        })?;
        if resp.verdict == ShimVerdict::Timeout {
            return Ok(Verdict::fail(timeout_feedback(self.timeout)));
        }
        let Some(measured) = resp.coverage else {
            return Err(GuardError::Infrastructure(
                "shim returned no coverage measurement".to_string(),
            ));
        };
        let mut problems = Vec::new();
        if measured.line < self.line_threshold {
            problems.push(format!(
                "Line coverage {:.2} < {:.2}",
                measured.line, self.line_threshold
            ));
        }
        if measured.branch < self.branch_threshold {
            problems.push(format!(
                "Branch coverage {:.2} < {:.2}",
                measured.branch, self.branch_threshold
            ));
        }
        Ok(if problems.is_empty() {
            Verdict::pass()
        } else {
            Verdict::fail(problems.join("\n"))
        })
    }
}
