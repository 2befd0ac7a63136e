//! Language-model abstraction: request type, backend trait, templates.

mod http;
mod scripted;
pub mod template;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{MatchMode, ScriptFile, ScriptRule, ScriptedBackend};
pub use template::{sanitize, Bindings, Placeholder, PromptSet, PromptTemplate, Role, TemplateError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const ACTION_MAX_TOKENS: u32 = 256;
pub const SHORT_MAX_TOKENS: u32 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("LM backend unavailable after {retries} retries: {message}")]
    BackendUnavailable { message: String, retries: u32 },
    #[error("no scripted rule matched {role} request (step {step}, attempt {attempt}): {preview:?}")]
    NoRuleMatched {
        role: Role,
        step: u32,
        attempt: u32,
        preview: String,
    },
    #[error("malformed LM response: {0}")]
    MalformedResponse(String),
    #[error("LM configuration error: {0}")]
    Config(String),
}

/// Where in a pipeline a request comes from. Scripted rules can match on
/// these fields; the HTTP backend ignores everything except `sample_key`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub role: Role,
    /// Index of the action being chosen within a rollout, 0 otherwise.
    pub step: u32,
    /// 0 for the first query, incremented by each re-sample or repair.
    pub attempt: u32,
    /// Caller-chosen key that makes `sample`-mode rules reproducible
    /// independent of call order.
    pub sample_key: u64,
}

impl RequestMeta {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            step: 0,
            attempt: 0,
            sample_key: 0,
        }
    }

    pub fn step(mut self, step: u32) -> Self {
        self.step = step;
        self
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }

    pub fn key(mut self, sample_key: u64) -> Self {
        self.sample_key = sample_key;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub meta: RequestMeta,
}

impl LmRequest {
    /// One-line request with role-dependent length budget.
    pub fn new(prompt: impl Into<String>, meta: RequestMeta) -> Self {
        let max_tokens = match meta.role {
            Role::Label | Role::Filter | Role::Instruct => SHORT_MAX_TOKENS,
            _ => ACTION_MAX_TOKENS,
        };
        Self {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens,
            stop: vec!["\n".to_string()],
            meta,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LmError::Config(format!("invalid temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LmError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A text-completion backend. Implementations must tolerate concurrent calls.
pub trait LanguageModel: Send + Sync {
    /// Raw model output, before stop handling.
    fn generate(&self, req: &LmRequest) -> Result<String, LmError>;

    /// Output cut at the first stop string and trimmed; never empty.
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        req.validate()?;
        let raw = self.generate(req)?;
        let text = truncate_at_stop(raw.trim_start_matches(['\n', '\r']), &req.stop).trim();
        if text.is_empty() {
            return Err(LmError::MalformedResponse("empty completion".into()));
        }
        Ok(text.to_string())
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn generate(&self, req: &LmRequest) -> Result<String, LmError> {
        (**self).generate(req)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn generate(&self, req: &LmRequest) -> Result<String, LmError> {
        (**self).generate(req)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn generate(&self, req: &LmRequest) -> Result<String, LmError> {
        (**self).generate(req)
    }
}

fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}
