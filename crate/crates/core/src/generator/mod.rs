//! The stochastic side of the system: anything that turns a prompt into a
//! candidate artifact.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod extract;
mod live;
mod mock;

pub use extract::extract_code;
pub use live::LiveGenerator;
pub use mock::{MockGenerator, MockGeneratorSpec, MockMode, MockOracleGuard};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a careful software engineer. \
Reply with exactly one Markdown fenced code block containing the requested code and nothing else.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerationError {
    /// Network or server failure; retried without consuming a guard retry.
    #[error("generation transport failure: {0}")]
    Transport(String),
    #[error("script for node `{node}` has no response for attempt {attempt}")]
    ScriptExhausted { node: String, attempt: u32 },
    #[error("generator misconfigured: {0}")]
    Misconfigured(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: Option<u64>,
    pub completion: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub raw_response: String,
    pub extracted_code: Option<String>,
    pub latency_ms: u64,
    #[serde(default)]
    pub tokens: TokenCounts,
}

impl GenerationResult {
    pub fn from_raw(raw_response: impl Into<String>, latency: Duration) -> Self {
        let raw_response = raw_response.into();
        Self {
            extracted_code: extract_code(&raw_response),
            raw_response,
            latency_ms: latency.as_millis() as u64,
            tokens: TokenCounts::default(),
        }
    }

    /// The model followed the fenced-code output format.
    pub fn qualified(&self) -> bool {
        self.extracted_code.is_some()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub node_id: &'a str,
    /// 1-based attempt index within the node.
    pub attempt: u32,
    pub prompt: &'a str,
}

/// One stateless completion per call: whatever the generator needs to know
/// must be in the request.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError>;
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
        (**self).generate(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_seconds: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Dotted path of the completion text in the response JSON
    /// (`response` for Ollama, `choices.0.text` for OpenAI-style completions).
    #[serde(default = "default_response_field")]
    pub response_field: String,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_system_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

fn default_request_timeout() -> f64 {
    300.0
}

fn default_response_field() -> String {
    "response".to_string()
}

impl GeneratorConfig {
    pub const DEFAULT_ENDPOINT: &'static str = "http://localhost:11434/api/generate";

    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            temperature: DEFAULT_TEMPERATURE,
            system_prompt: default_system_prompt(),
            request_timeout_seconds: default_request_timeout(),
            max_tokens: None,
            response_field: default_response_field(),
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenerationError::Misconfigured(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.request_timeout_seconds.is_nan() || self.request_timeout_seconds <= 0.0 {
            return Err(GenerationError::Misconfigured("request timeout must be positive".into()));
        }
        if self.model_name.is_empty() {
            return Err(GenerationError::Misconfigured("model name is empty".into()));
        }
        Ok(())
    }
}
