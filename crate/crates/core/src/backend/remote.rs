use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{check_generate_request, check_score_request, Backend, BackendError};
use crate::types::{DecodeParams, DecodeStrategy, TokenScores};

/// Tolerance applied to `mean_nll` against the returned log-probabilities.
const SCORE_CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubles each time.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << (retry - 1).min(16))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(60), retry: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDecode {
    pub strategy: DecodeStrategy,
    pub top_k: u32,
    pub top_p: f64,
    pub beam_size: u32,
    pub max_new_tokens: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub input: String,
    pub num_return: usize,
    pub decode: WireDecode,
}

impl GenerateRequest {
    pub fn new(input: &str, params: &DecodeParams) -> Self {
        Self {
            input: input.to_string(),
            num_return: params.num_return,
            decode: WireDecode {
                strategy: params.strategy,
                top_k: params.top_k,
                top_p: params.top_p,
                beam_size: params.beam_size,
                max_new_tokens: params.max_new_tokens,
                seed: params.seed,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct GenerateResponse {
    candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Deserialize)]
struct Candidate {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<f64>,
    pub num_tokens: usize,
    pub mean_nll: f64,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Blocking HTTP client for the inference server. The underlying agent keeps
/// a connection pool and may be shared across threads.
#[derive(Debug)]
pub struct RemoteClient {
    agent: ureq::Agent,
    config: RemoteConfig,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { agent, config }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// POSTs `body` and returns the response text, retrying on 503 and on
    /// transport failures.
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError> {
        let url = self.url(path);
        let attempts = self.config.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            let result = self
                .agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_string(body);
            match result {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| BackendError::InvalidResponse(format!("reading body: {e}")));
                }
                Err(ureq::Error::Status(503, resp)) => {
                    last = error_message(resp);
                    warn!(%url, attempt, "backend returned 503: {last}");
                }
                Err(ureq::Error::Status(status, resp)) => {
                    return Err(BackendError::Rejected { status, message: error_message(resp) });
                }
                Err(ureq::Error::Transport(t)) => {
                    last = t.to_string();
                    warn!(%url, attempt, "transport error: {last}");
                }
            }
        }
        Err(BackendError::BackendUnavailable { attempts, message: last })
    }
}

fn error_message(resp: ureq::Response) -> String {
    let text = resp.into_string().unwrap_or_default();
    serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text)
}

impl Backend for RemoteClient {
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError> {
        check_generate_request(input, params)?;
        let body = serde_json::to_string(&GenerateRequest::new(input, params))
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let text = self.post("/v1/generate", &body)?;
        let resp: GenerateResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(format!("generate: {e}")))?;
        if resp.candidates.len() != params.num_return {
            return Err(BackendError::InvalidResponse(format!(
                "requested {} candidates, got {}",
                params.num_return,
                resp.candidates.len()
            )));
        }
        Ok(resp.candidates.into_iter().map(|c| c.text).collect())
    }

    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError> {
        check_score_request(input, target)?;
        let body = serde_json::to_string(&ScoreRequest { input: input.to_string(), target: target.to_string() })
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let text = self.post("/v1/score", &body)?;
        let resp: ScoreResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidScore(format!("score: {e}")))?;
        let raw = TokenScores { token_logprobs: resp.token_logprobs, num_tokens: resp.num_tokens, mean_nll: resp.mean_nll };
        raw.check_consistency(SCORE_CONSISTENCY_TOL)
            .map_err(|e| BackendError::InvalidScore(e.to_string()))?;
        // recompute so the stored mean is exact for the returned vector
        TokenScores::from_logprobs(raw.token_logprobs).map_err(|e| BackendError::InvalidScore(e.to_string()))
    }
}
