//! Seeded stand-in generators.
//!
//! In the Bernoulli modes each `(seed, node, attempt)` triple maps to one
//! uniform draw, so a run is reproducible and independent of call order.
//! The draw decides between a designated passing artifact and a designated
//! failing one; [`MockOracleGuard`] tells them apart.

use std::time::Duration;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationError, GenerationRequest, GenerationResult, Generator};
use crate::guards::{Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

pub const DEFAULT_PASS_ARTIFACT: &str = "# mock artifact: pass\nresult = True";
pub const DEFAULT_FAIL_ARTIFACT: &str = "# mock artifact: fail\nresult = False";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Every attempt succeeds independently with probability `epsilon`.
    Memoryless,
    /// Attempt `k` (0-based retry index) succeeds with
    /// `min(1, epsilon + k * improvement_delta)`.
    Improving,
    /// Replays `script[node][attempt - 1]` verbatim.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockGeneratorSpec {
    pub mode: MockMode,
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default)]
    pub improvement_delta: f64,
    /// Raw model responses per node, for scripted mode.
    #[serde(default)]
    pub script: IndexMap<String, Vec<String>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pass")]
    pub pass_artifact: String,
    #[serde(default = "default_fail")]
    pub fail_artifact: String,
}

fn one() -> f64 {
    1.0
}

fn default_pass() -> String {
    DEFAULT_PASS_ARTIFACT.to_string()
}

fn default_fail() -> String {
    DEFAULT_FAIL_ARTIFACT.to_string()
}

impl MockGeneratorSpec {
    pub fn memoryless(epsilon: f64, seed: u64) -> Self {
        Self {
            mode: MockMode::Memoryless,
            epsilon,
            improvement_delta: 0.0,
            script: IndexMap::new(),
            seed,
            pass_artifact: default_pass(),
            fail_artifact: default_fail(),
        }
    }

    pub fn improving(epsilon: f64, improvement_delta: f64, seed: u64) -> Self {
        Self {
            mode: MockMode::Improving,
            improvement_delta,
            ..Self::memoryless(epsilon, seed)
        }
    }

    pub fn scripted<I, K, V>(script: I) -> Self
    where
        I: IntoIterator<Item = (K, Vec<V>)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            mode: MockMode::Scripted,
            script: script
                .into_iter()
                .map(|(k, v)| (k.into(), v.into_iter().map(Into::into).collect()))
                .collect(),
            ..Self::memoryless(1.0, 0)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Success probability of the attempt with 0-based retry index `retry`.
    pub fn success_probability(&self, retry: u32) -> f64 {
        match self.mode {
            MockMode::Memoryless => self.epsilon,
            MockMode::Improving => (self.epsilon + retry as f64 * self.improvement_delta).min(1.0),
            MockMode::Scripted => f64::NAN,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.mode == MockMode::Scripted {
            return Ok(());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(GenerationError::Misconfigured(format!(
                "epsilon {} outside (0, 1]: a generator that can never succeed has no retry bound",
                self.epsilon
            )));
        }
        if !(self.improvement_delta >= 0.0 && self.improvement_delta.is_finite()) {
            return Err(GenerationError::Misconfigured("improvement_delta must be >= 0".into()));
        }
        if self.pass_artifact == self.fail_artifact {
            return Err(GenerationError::Misconfigured("pass and fail artifacts must differ".into()));
        }
        Ok(())
    }
}

/// Uniform draw in `[0, 1)` determined by `(seed, node, attempt)`.
pub fn attempt_draw(seed: u64, node_id: &str, attempt: u32) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((node_id.len() as u64).to_le_bytes());
    h.update(node_id.as_bytes());
    h.update(attempt.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed).gen::<f64>()
}

fn fenced(code: &str) -> String {
    format!("```python\n{code}\n```")
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    spec: MockGeneratorSpec,
}

impl MockGenerator {
    pub fn new(spec: MockGeneratorSpec) -> Result<Self, GenerationError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MockGeneratorSpec {
        &self.spec
    }

    /// Bernoulli outcome of an attempt (meaningless in scripted mode).
    pub fn attempt_succeeds(&self, node_id: &str, attempt: u32) -> bool {
        let p = self.spec.success_probability(attempt.saturating_sub(1));
        attempt_draw(self.spec.seed, node_id, attempt) < p
    }

    pub fn mock_generate(&self, node_id: &str, attempt: u32) -> Result<GenerationResult, GenerationError> {
        let raw = match self.spec.mode {
            MockMode::Scripted => self
                .spec
                .script
                .get(node_id)
                .and_then(|responses| responses.get(attempt.checked_sub(1)? as usize))
                .cloned()
                .ok_or_else(|| GenerationError::ScriptExhausted {
                    node: node_id.to_string(),
                    attempt,
                })?,
            MockMode::Memoryless | MockMode::Improving => {
                if self.attempt_succeeds(node_id, attempt) {
                    fenced(&self.spec.pass_artifact)
                } else {
                    fenced(&self.spec.fail_artifact)
                }
            }
        };
        Ok(GenerationResult::from_raw(raw, Duration::ZERO))
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
        self.mock_generate(request.node_id, request.attempt)
    }
}

/// Passes exactly the mock's designated passing artifact.
#[derive(Debug, Clone)]
pub struct MockOracleGuard {
    pass_artifact: String,
}

impl Default for MockOracleGuard {
    fn default() -> Self {
        Self::new(DEFAULT_PASS_ARTIFACT)
    }
}

impl MockOracleGuard {
    pub fn new(pass_artifact: impl Into<String>) -> Self {
        Self {
            pass_artifact: pass_artifact.into(),
        }
    }
}

impl Guard for MockOracleGuard {
    fn type_name(&self) -> &str {
        "mock"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        Ok(if artifact == self.pass_artifact {
            Verdict::pass()
        } else {
            Verdict::fail("AssertionError: mock oracle rejected artifact")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::AmbientEnvironment;

    #[test]
    fn certain_generator_always_passes() {
        let g = MockGenerator::new(MockGeneratorSpec::memoryless(1.0, 7)).unwrap();
        for attempt in 1..=50 {
            let r = g.mock_generate("n", attempt).unwrap();
            assert_eq!(r.extracted_code.as_deref(), Some(DEFAULT_PASS_ARTIFACT));
        }
    }

    #[test]
    fn zero_epsilon_rejected() {
        assert!(MockGenerator::new(MockGeneratorSpec::memoryless(0.0, 7)).is_err());
        assert!(MockGenerator::new(MockGeneratorSpec::memoryless(1.5, 7)).is_err());
        assert!(MockGenerator::new(MockGeneratorSpec::improving(0.3, -0.1, 7)).is_err());
    }

    #[test]
    fn draws_are_reproducible_and_order_free() {
        let a = MockGenerator::new(MockGeneratorSpec::memoryless(0.5, 42)).unwrap();
        let b = MockGenerator::new(MockGeneratorSpec::memoryless(0.5, 42)).unwrap();
        let forward: Vec<_> = (1..=20).map(|k| a.mock_generate("n", k).unwrap()).collect();
        let mut backward: Vec<_> = (1..=20).rev().map(|k| b.mock_generate("n", k).unwrap()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        let other_seed = MockGenerator::new(MockGeneratorSpec::memoryless(0.5, 43)).unwrap();
        let differs = (1..=20).any(|k| other_seed.attempt_succeeds("n", k) != a.attempt_succeeds("n", k));
        assert!(differs);
    }

    #[test]
    fn empirical_rate_tracks_epsilon() {
        for eps in [0.3, 0.5, 0.9] {
            let g = MockGenerator::new(MockGeneratorSpec::memoryless(eps, 11)).unwrap();
            let hits = (0..10_000).filter(|i| g.attempt_succeeds(&format!("node{i}"), 1)).count();
            let rate = hits as f64 / 10_000.0;
            assert!((rate - eps).abs() <= 0.02, "eps={eps} rate={rate}");
        }
    }

    #[test]
    fn improving_probability_schedule() {
        let s = MockGeneratorSpec::improving(0.3, 0.2, 0);
        let p: Vec<f64> = (0..5).map(|k| s.success_probability(k)).collect();
        let expected = [0.3, 0.5, 0.7, 0.9, 1.0];
        for (got, want) in p.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scripted_replays_and_exhausts() {
        let g = MockGenerator::new(MockGeneratorSpec::scripted([(
            "g_impl",
            vec!["```\nfailing\n```", "```\nfixed\n```"],
        )]))
        .unwrap();
        assert_eq!(g.mock_generate("g_impl", 1).unwrap().extracted_code.as_deref(), Some("failing"));
        assert_eq!(g.mock_generate("g_impl", 2).unwrap().extracted_code.as_deref(), Some("fixed"));
        assert_eq!(
            g.mock_generate("g_impl", 3),
            Err(GenerationError::ScriptExhausted {
                node: "g_impl".into(),
                attempt: 3
            })
        );
        assert!(g.mock_generate("other", 1).is_err());
    }

    #[test]
    fn oracle_guard_separates_designated_artifacts() {
        let ctx = Context::new(AmbientEnvironment::default(), "");
        let g = MockOracleGuard::default();
        assert!(g.evaluate(DEFAULT_PASS_ARTIFACT, &ctx, &Dependencies::new()).unwrap().passed);
        assert!(!g.evaluate(DEFAULT_FAIL_ARTIFACT, &ctx, &Dependencies::new()).unwrap().passed);
    }

    #[test]
    fn spec_json_round_trip() {
        let s: MockGeneratorSpec = serde_json::from_str(r#"{"mode":"improving","epsilon":0.3,"improvement_delta":0.2,"seed":5}"#).unwrap();
        assert_eq!(s, MockGeneratorSpec::improving(0.3, 0.2, 5));
    }
}
