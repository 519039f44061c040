use std::sync::OnceLock;

use regex::Regex;

use super::command::ExternalCommandGuard;
use super::{Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

/// Hardcoded-credential shapes: a literal assigned to a secret-ish name, or
/// a bearer token.
pub const SECRET_PATTERNS: [&str; 2] = [
    r#"(?i)(api_key|secret|password|token)\s*=\s*['"][^'"]+['"]"#,
    r"(?i)Bearer\s+[A-Za-z0-9\-_]+\.[A-Za-z0-9\-_]+",
];

fn secret_regexes() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        SECRET_PATTERNS
            .iter()
            .map(|p| Regex::new(p).expect("secret pattern compiles"))
            .collect()
    })
}

pub fn contains_secret(content: &str) -> bool {
    secret_regexes().iter().any(|re| re.is_match(content))
}

/// Secret scan, then formatter check, then linter. Either tool may be
/// left unset to skip that stage.
#[derive(Debug, Clone, Default)]
pub struct PreCommitGuard {
    formatter: Option<ExternalCommandGuard>,
    linter: Option<ExternalCommandGuard>,
}

impl PreCommitGuard {
    pub fn new(formatter: Option<ExternalCommandGuard>, linter: Option<ExternalCommandGuard>) -> Self {
        Self { formatter, linter }
    }

    pub fn secrets_only() -> Self {
        Self::default()
    }
}

impl Guard for PreCommitGuard {
    fn type_name(&self) -> &str {
        "pre_commit"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        if contains_secret(artifact) {
            return Ok(Verdict::fail(
                "Security Risk: Potential hardcoded secret detected.",
            ));
        }
        if let Some(fmt) = &self.formatter {
            if let Err(output) = fmt.run(artifact)? {
                return Ok(Verdict::fail(format!(
                    "Style Error: Code is not formatted (`{}`).\n{output}",
                    fmt.template().join(" ")
                )));
            }
        }
        if let Some(lint) = &self.linter {
            if let Err(output) = lint.run(artifact)? {
                return Ok(Verdict::fail(format!("Linting failed:\n{output}")));
            }
        }
        Ok(Verdict::pass())
    }
}
