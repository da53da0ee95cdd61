//! Generator/scorer backends.
//!
//! The engine talks to one model through two calls: `generate` (sample
//! candidate continuations for an input) and `score` (teacher-forced
//! per-token log-probabilities of a target). [`GeneratorHandle`] selects
//! between the deterministic scripted [`MockBackend`] and the HTTP
//! [`RemoteClient`].

mod mock;
mod remote;

use thiserror::Error;

use crate::types::{DecodeParams, TokenScores, TypesError};

pub use mock::{GenerateRule, MockBackend, MockScript, ScoreRule, FALLBACK_LOSS_RANGE};
pub use remote::{GenerateRequest, RemoteClient, RemoteConfig, RetryPolicy, ScoreRequest, ScoreResponse};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("backend rejected request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("invalid score response: {0}")]
    InvalidScore(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("no scripted entry for {kind} request and fallback is disabled")]
    ScriptMiss { kind: &'static str },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl From<TypesError> for BackendError {
    fn from(e: TypesError) -> Self {
        BackendError::InvalidRequest(e.to_string())
    }
}

/// The model, seen as a generator and a scorer. Implementations must accept
/// concurrent calls.
pub trait Backend: Send + Sync {
    /// Returns exactly `params.num_return` candidate texts for `input`.
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError>;

    /// Per-token log-probabilities of `target` given `input`.
    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError> {
        (**self).generate(input, params)
    }

    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError> {
        (**self).score(input, target)
    }
}

fn check_generate_request(input: &str, params: &DecodeParams) -> Result<(), BackendError> {
    if input.trim().is_empty() {
        return Err(BackendError::InvalidRequest("empty input".into()));
    }
    params.validate()?;
    Ok(())
}

fn check_score_request(input: &str, target: &str) -> Result<(), BackendError> {
    if input.trim().is_empty() || target.trim().is_empty() {
        return Err(BackendError::InvalidRequest("input and target must be nonempty".into()));
    }
    Ok(())
}

/// Exactly one active backend.
#[derive(Debug)]
pub enum GeneratorHandle {
    Mock(MockBackend),
    Remote(RemoteClient),
}

impl GeneratorHandle {
    pub fn kind(&self) -> &'static str {
        match self {
            GeneratorHandle::Mock(_) => "mock",
            GeneratorHandle::Remote(_) => "remote",
        }
    }
}

impl Backend for GeneratorHandle {
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError> {
        match self {
            GeneratorHandle::Mock(m) => m.generate(input, params),
            GeneratorHandle::Remote(r) => r.generate(input, params),
        }
    }

    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError> {
        match self {
            GeneratorHandle::Mock(m) => m.score(input, target),
            GeneratorHandle::Remote(r) => r.score(input, target),
        }
    }
}
