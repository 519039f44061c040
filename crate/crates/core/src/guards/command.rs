use std::io::Write;
use std::time::Duration;

use super::process::run_with_timeout;
use super::{tail, timeout_feedback, Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

pub const ARTIFACT_PATH_PLACEHOLDER: &str = "{artifact_path}";
const OUTPUT_TAIL_BYTES: usize = 6 * 1024;

/// Runs an external tool on the artifact, written to a temporary file whose
/// path replaces `{artifact_path}` in the command template. Passes iff the
/// exit code is one of `pass_exit_codes`.
#[derive(Debug, Clone)]
pub struct ExternalCommandGuard {
    name: String,
    template: Vec<String>,
    pass_exit_codes: Vec<i32>,
    timeout: Duration,
    suffix: String,
}

impl ExternalCommandGuard {
    pub fn new(template: Vec<String>, pass_exit_codes: Vec<i32>, timeout: Duration) -> Result<Self, GuardError> {
        if template.is_empty() {
            return Err(GuardError::Misconfigured("empty command template".into()));
        }
        Ok(Self {
            name: "command".into(),
            template,
            pass_exit_codes,
            timeout,
            suffix: ".py".into(),
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// File extension for the temporary artifact file (default `.py`).
    pub fn with_suffix(mut self, suffix: impl Into<String>) -> Self {
        self.suffix = suffix.into();
        self
    }

    pub fn template(&self) -> &[String] {
        &self.template
    }

    /// Run the command; `Ok(Err(output))` carries the failing tool output.
    pub(crate) fn run(&self, artifact: &str) -> Result<Result<(), String>, GuardError> {
        let mut file = tempfile::Builder::new()
            .prefix("artifact-")
            .suffix(&self.suffix)
            .tempfile()
            .map_err(|e| GuardError::Infrastructure(format!("cannot stage artifact: {e}")))?;
        file.write_all(artifact.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| GuardError::Infrastructure(format!("cannot stage artifact: {e}")))?;
        let path = file.path().to_string_lossy().into_owned();
        let argv: Vec<String> = self
            .template
            .iter()
            .map(|arg| arg.replace(ARTIFACT_PATH_PLACEHOLDER, &path))
            .collect();
        let out = run_with_timeout(&argv, None, file.path().parent(), self.timeout).map_err(|e| {
            GuardError::Infrastructure(format!("cannot run `{}`: {e}", self.template[0]))
        })?;
        if out.timed_out {
            return Ok(Err(timeout_feedback(self.timeout)));
        }
        match out.code {
            Some(code) if self.pass_exit_codes.contains(&code) => Ok(Ok(())),
            code => {
                let combined = out.combined();
                let text = tail(combined.trim_end(), OUTPUT_TAIL_BYTES);
                Ok(Err(if text.is_empty() {
                    format!("`{}` exited with {}", self.template[0], code.map_or("signal".into(), |c| c.to_string()))
                } else {
                    text.to_string()
                }))
            }
        }
    }
}

impl Guard for ExternalCommandGuard {
    fn type_name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        Ok(match self.run(artifact)? {
            Ok(()) => Verdict::pass(),
            Err(output) => Verdict::fail(output),
        })
    }
}
