//! Guard registry: maps the guard type names used in workflow documents to
//! evaluator factories. Each factory receives the node's optional
//! `guard_config` JSON value.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use super::{
    CharacterizationGuard, CompositeGuard, CoverageGuard, DynamicTestGuard, ExternalCommandGuard, Guard,
    GuardError, HumanGuard, ImportBoundaryGuard, ParallelGuard, PreCommitGuard, ShimClient, SyntaxGuard,
    DEFAULT_GUARD_TIMEOUT,
};
use crate::generator::MockOracleGuard;

pub type GuardFactory = dyn Fn(&GuardRegistry, &Value) -> Result<Arc<dyn Guard>, GuardError> + Send + Sync;

/// Shared settings handed to the built-in factories.
#[derive(Debug, Clone)]
pub struct GuardSettings {
    pub shim: ShimClient,
    pub timeout: Duration,
}

impl Default for GuardSettings {
    fn default() -> Self {
        Self {
            shim: ShimClient::from_env(),
            timeout: DEFAULT_GUARD_TIMEOUT,
        }
    }
}

#[derive(Clone)]
pub struct GuardRegistry {
    settings: GuardSettings,
    factories: BTreeMap<String, Arc<GuardFactory>>,
}

impl fmt::Debug for GuardRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardRegistry")
            .field("settings", &self.settings)
            .field("types", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// A member reference inside composite/parallel configs: either a bare type
/// name or `{"type": ..., "config": ...}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MemberSpec {
    Name(String),
    Full {
        #[serde(rename = "type")]
        type_name: String,
        #[serde(default)]
        config: Value,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MembersConfig {
    guards: Vec<MemberSpec>,
    #[serde(default)]
    max_workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SandboxConfig {
    #[serde(default)]
    timeout_seconds: Option<f64>,
    #[serde(default, alias = "legacy_from", alias = "implementation_from")]
    tests_from: Option<String>,
    #[serde(default)]
    line_threshold: Option<f64>,
    #[serde(default)]
    branch_threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandConfig {
    command: Vec<String>,
    #[serde(default = "default_pass_codes")]
    pass_exit_codes: Vec<i32>,
    #[serde(default)]
    timeout_seconds: Option<f64>,
    #[serde(default)]
    suffix: Option<String>,
}

fn default_pass_codes() -> Vec<i32> {
    vec![0]
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureConfig {
    #[serde(default)]
    deny: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreCommitConfig {
    #[serde(default = "default_formatter")]
    format_command: Option<Vec<String>>,
    #[serde(default = "default_linter")]
    lint_command: Option<Vec<String>>,
}

impl Default for PreCommitConfig {
    fn default() -> Self {
        Self {
            format_command: default_formatter(),
            lint_command: default_linter(),
        }
    }
}

fn default_formatter() -> Option<Vec<String>> {
    Some(vec!["black".into(), "--check".into(), "--quiet".into(), "{artifact_path}".into()])
}

fn default_linter() -> Option<Vec<String>> {
    Some(vec!["ruff".into(), "check".into(), "--quiet".into(), "{artifact_path}".into()])
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HumanConfig {
    #[serde(default)]
    prompt: Option<String>,
}

fn config<T: DeserializeOwned + Default>(type_name: &str, value: &Value) -> Result<T, GuardError> {
    if value.is_null() {
        return Ok(T::default());
    }
    required_config(type_name, value)
}

fn required_config<T: DeserializeOwned>(type_name: &str, value: &Value) -> Result<T, GuardError> {
    serde_json::from_value(value.clone())
        .map_err(|e| GuardError::Misconfigured(format!("`{type_name}` guard config: {e}")))
}

fn secs(value: Option<f64>, default: Duration) -> Result<Duration, GuardError> {
    match value {
        None => Ok(default),
        Some(s) if s > 0.0 && s.is_finite() => Ok(Duration::from_secs_f64(s)),
        Some(s) => Err(GuardError::Misconfigured(format!("timeout {s} must be positive"))),
    }
}

impl Default for GuardRegistry {
    fn default() -> Self {
        Self::with_defaults(GuardSettings::default())
    }
}

impl GuardRegistry {
    /// A registry with no guard types at all.
    pub fn empty(settings: GuardSettings) -> Self {
        Self {
            settings,
            factories: BTreeMap::new(),
        }
    }

    /// All built-in guard types.
    pub fn with_defaults(settings: GuardSettings) -> Self {
        let mut r = Self::empty(settings);

        r.register("syntax", |reg, cfg| {
            let c: SandboxConfig = config("syntax", cfg)?;
            let timeout = secs(c.timeout_seconds, reg.settings.timeout)?;
            Ok(Arc::new(SyntaxGuard::new(reg.settings.shim.clone(), timeout)))
        });
        r.register("dynamic_test", |reg, cfg| {
            let c: SandboxConfig = config("dynamic_test", cfg)?;
            let timeout = secs(c.timeout_seconds, reg.settings.timeout)?;
            Ok(Arc::new(DynamicTestGuard::new(reg.settings.shim.clone(), timeout, c.tests_from)))
        });
        r.register("characterization", |reg, cfg| {
            let c: SandboxConfig = config("characterization", cfg)?;
            let timeout = secs(c.timeout_seconds, reg.settings.timeout)?;
            Ok(Arc::new(CharacterizationGuard::new(reg.settings.shim.clone(), timeout, c.tests_from)))
        });
        r.register("coverage", |reg, cfg| {
            let c: SandboxConfig = config("coverage", cfg)?;
            let timeout = secs(c.timeout_seconds, reg.settings.timeout)?;
            Ok(Arc::new(CoverageGuard::new(
                reg.settings.shim.clone(),
                timeout,
                c.line_threshold.unwrap_or(CoverageGuard::DEFAULT_LINE_THRESHOLD),
                c.branch_threshold.unwrap_or(CoverageGuard::DEFAULT_BRANCH_THRESHOLD),
                c.tests_from,
            )?))
        });
        r.register("architecture", |_, cfg| {
            let c: ArchitectureConfig = config("architecture", cfg)?;
            Ok(Arc::new(match c.deny {
                Some(deny) => ImportBoundaryGuard::new(deny),
                None => ImportBoundaryGuard::default(),
            }))
        });
        r.register("command", |reg, cfg| {
            let c: CommandConfig = required_config("command", cfg)?;
            reg.command_guard("command", c)
        });
        r.register("type", |reg, cfg| {
            let c: CommandConfig = if cfg.is_null() {
                CommandConfig {
                    command: vec!["mypy".into(), "{artifact_path}".into()],
                    pass_exit_codes: default_pass_codes(),
                    timeout_seconds: None,
                    suffix: None,
                }
            } else {
                required_config("type", cfg)?
            };
            reg.command_guard("type", c)
        });
        r.register("pre_commit", |reg, cfg| {
            let c: PreCommitConfig = config("pre_commit", cfg)?;
            let tool = |cmd: Option<Vec<String>>| -> Result<Option<ExternalCommandGuard>, GuardError> {
                cmd.map(|command| ExternalCommandGuard::new(command, vec![0], reg.settings.timeout))
                    .transpose()
            };
            Ok(Arc::new(PreCommitGuard::new(tool(c.format_command)?, tool(c.lint_command)?)))
        });
        r.register("human", |_, cfg| {
            let c: HumanConfig = config("human", cfg)?;
            Ok(Arc::new(HumanGuard::stdio(
                c.prompt.unwrap_or_else(|| HumanGuard::DEFAULT_PROMPT.to_string()),
            )))
        });
        r.register("composite", |reg, cfg| {
            let c: MembersConfig = required_config("composite", cfg)?;
            Ok(Arc::new(CompositeGuard::new(reg.members(c.guards)?)?))
        });
        r.register("parallel", |reg, cfg| {
            let c: MembersConfig = required_config("parallel", cfg)?;
            Ok(Arc::new(ParallelGuard::new(
                reg.members(c.guards)?,
                c.max_workers.unwrap_or(ParallelGuard::DEFAULT_MAX_WORKERS),
            )?))
        });
        r.register("mock", |_, cfg| {
            #[derive(Deserialize, Default)]
            #[serde(deny_unknown_fields)]
            struct MockConfig {
                #[serde(default)]
                pass_artifact: Option<String>,
            }
            let c: MockConfig = config("mock", cfg)?;
            Ok(Arc::new(match c.pass_artifact {
                Some(p) => MockOracleGuard::new(p),
                None => MockOracleGuard::default(),
            }))
        });
        r
    }

    pub fn settings(&self) -> &GuardSettings {
        &self.settings
    }

    pub fn register<F>(&mut self, type_name: impl Into<String>, factory: F)
    where
        F: Fn(&GuardRegistry, &Value) -> Result<Arc<dyn Guard>, GuardError> + Send + Sync + 'static,
    {
        self.factories.insert(type_name.into(), Arc::new(factory));
    }

    /// Register a ready-made evaluator; any config is ignored.
    pub fn register_guard(&mut self, type_name: impl Into<String>, guard: Arc<dyn Guard>) {
        self.register(type_name, move |_, _| Ok(Arc::clone(&guard)));
    }

    pub fn contains(&self, type_name: &str) -> bool {
        self.factories.contains_key(type_name)
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, type_name: &str, config: &Value) -> Result<Arc<dyn Guard>, GuardError> {
        let factory = self
            .factories
            .get(type_name)
            .ok_or_else(|| GuardError::UnknownType(type_name.to_string()))?;
        factory(self, config)
    }

    fn members(&self, specs: Vec<MemberSpec>) -> Result<Vec<Arc<dyn Guard>>, GuardError> {
        specs
            .into_iter()
            .map(|m| match m {
                MemberSpec::Name(name) => self.build(&name, &Value::Null),
                MemberSpec::Full { type_name, config } => self.build(&type_name, &config),
            })
            .collect()
    }

    fn command_guard(&self, name: &str, c: CommandConfig) -> Result<Arc<dyn Guard>, GuardError> {
        let timeout = secs(c.timeout_seconds, self.settings.timeout)?;
        let mut g = ExternalCommandGuard::new(c.command, c.pass_exit_codes, timeout)?.named(name);
        if let Some(suffix) = c.suffix {
            g = g.with_suffix(suffix);
        }
        Ok(Arc::new(g))
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::guards::{Dependencies, Verdict};
    use crate::state::{AmbientEnvironment, Context};

    fn reg() -> GuardRegistry {
        GuardRegistry::with_defaults(GuardSettings {
            shim: ShimClient::new(vec!["no-shim".into()]),
            timeout: Duration::from_secs(5),
        })
    }

    fn ctx() -> Context {
        Context::new(AmbientEnvironment::default(), "")
    }

    #[test]
    fn builtin_names_registered() {
        let r = reg();
        for name in [
            "syntax",
            "dynamic_test",
            "type",
            "architecture",
            "characterization",
            "coverage",
            "composite",
            "parallel",
            "human",
            "pre_commit",
            "command",
            "mock",
        ] {
            assert!(r.contains(name), "{name}");
        }
        assert!(matches!(r.build("nope", &Value::Null), Err(GuardError::UnknownType(_))));
    }

    #[test]
    fn composite_from_config() {
        let g = reg()
            .build(
                "composite",
                &json!({"guards": [{"type": "architecture", "config": {"deny": ["os"]}}, "architecture"]}),
            )
            .unwrap();
        assert_eq!(
            g.evaluate("import os\n", &ctx(), &Dependencies::new()).unwrap(),
            Verdict::fail("Domain imports infrastructure: os")
        );
        assert!(g.evaluate("import json\n", &ctx(), &Dependencies::new()).unwrap().passed);
    }

    #[test]
    fn parallel_and_command_from_config() {
        let g = reg()
            .build(
                "parallel",
                &json!({"guards": [{"type": "command", "config": {"command": ["false"]}}, "architecture"], "max_workers": 2}),
            )
            .unwrap();
        let v = g.evaluate("import boto3\n", &ctx(), &Dependencies::new()).unwrap();
        assert!(v.feedback.contains("\n---\nDomain imports infrastructure: boto3"), "{}", v.feedback);
    }

    #[test]
    fn bad_configs_rejected() {
        let r = reg();
        assert!(r.build("command", &Value::Null).is_err());
        assert!(r.build("composite", &json!({"guards": []})).is_err());
        assert!(r.build("coverage", &json!({"line_threshold": 2.0})).is_err());
        assert!(r.build("syntax", &json!({"timeout_seconds": -1})).is_err());
        assert!(r.build("architecture", &json!({"bogus": 1})).is_err());
    }

    #[test]
    fn sandbox_guard_without_shim_is_infrastructure_error() {
        let g = reg().build("syntax", &Value::Null).unwrap();
        assert!(matches!(
            g.evaluate("x = 1", &ctx(), &Dependencies::new()),
            Err(GuardError::Infrastructure(_))
        ));
    }
}
