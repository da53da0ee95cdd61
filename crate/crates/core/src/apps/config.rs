//! Engine configuration loaded from a TOML file.
//!
//! Keys may be written as tables (`[decode]`) or dotted (`decode.top_k = 50`).
//! Every field is optional; omitted fields keep their defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use super::docnli::{DocNliConfig, DEFAULT_THRESHOLD};
use super::AppError;
use crate::backend::{GeneratorHandle, MockBackend, MockScript, RemoteClient, RemoteConfig, RetryPolicy};
use crate::reranker::{Aggregation, RerankConfig};
use crate::sampler::KpStrategy;
use crate::search::{SearchConfig, SearchMode};
use crate::types::{AuxTask, DecodeParams, DecodeStrategy};

pub const ENDPOINT_ENV: &str = "CQG_BACKEND_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub endpoint: Option<String>,
    /// Mock script JSON, relative to the config file.
    pub script: Option<PathBuf>,
    pub timeout_ms: Option<u64>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: Option<DecodeStrategy>,
    pub top_k: Option<u32>,
    pub top_p: Option<f64>,
    pub beam_size: Option<u32>,
    pub num_return: Option<usize>,
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub beam_size: Option<usize>,
    pub mode: Option<SearchMode>,
    pub max_turns: Option<usize>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TaskList {
    List(Vec<String>),
    Csv(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankSection {
    pub enabled: Option<bool>,
    pub tasks: Option<TaskList>,
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpSection {
    /// `paper`, `constant`, `length` or `none`.
    pub strategy: Option<String>,
    pub slope: Option<f64>,
    pub cap: Option<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocNliSection {
    pub threshold: Option<f64>,
    pub use_history: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub rerank: RerankSection,
    #[serde(default)]
    pub kp: KpSection,
    #[serde(default)]
    pub docnli: DocNliSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, AppError> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| AppError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Applies environment overrides through `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(endpoint) = lookup(ENDPOINT_ENV).filter(|s| !s.is_empty()) {
            self.backend.endpoint = Some(endpoint);
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.search.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn decode_params(&self) -> DecodeParams {
        let d = DecodeParams::default();
        let s = &self.decode;
        DecodeParams {
            strategy: s.strategy.unwrap_or(d.strategy),
            top_k: s.top_k.unwrap_or(d.top_k),
            top_p: s.top_p.unwrap_or(d.top_p),
            beam_size: s.beam_size.unwrap_or(d.beam_size),
            num_return: s.num_return.unwrap_or(d.num_return),
            max_new_tokens: s.max_new_tokens.unwrap_or(d.max_new_tokens),
            seed: self.seed(),
        }
    }

    pub fn rerank_config(&self) -> Result<RerankConfig, AppError> {
        let mut cfg = RerankConfig::default();
        if let Some(enabled) = self.rerank.enabled {
            cfg.enabled = enabled;
        }
        if let Some(agg) = self.rerank.aggregation {
            cfg.aggregation = agg;
        }
        if let Some(list) = &self.rerank.tasks {
            let names: Vec<String> = match list {
                TaskList::List(v) => v.clone(),
                TaskList::Csv(s) => s.split(',').map(str::to_string).collect(),
            };
            cfg.tasks = names
                .iter()
                .map(|n| n.trim())
                .filter(|n| !n.is_empty())
                .map(|n| n.parse::<AuxTask>().map_err(|_| AppError::Config(format!("unknown rerank task {n:?}"))))
                .collect::<Result<_, _>>()?;
        }
        cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn kp_strategy(&self) -> Result<KpStrategy, AppError> {
        let k = &self.kp;
        let strategy = match k.strategy.as_deref().unwrap_or("paper") {
            "paper" => {
                let KpStrategy::Paper { slope, cap } = KpStrategy::paper() else { unreachable!() };
                KpStrategy::Paper { slope: k.slope.unwrap_or(slope), cap: k.cap.unwrap_or(cap) }
            }
            "length" => {
                let KpStrategy::Length { slope, cap } = KpStrategy::length() else { unreachable!() };
                KpStrategy::Length { slope: k.slope.unwrap_or(slope), cap: k.cap.unwrap_or(cap) }
            }
            "constant" => {
                let KpStrategy::Constant { value } = KpStrategy::constant() else { unreachable!() };
                KpStrategy::Constant { value: k.value.unwrap_or(value) }
            }
            "none" => KpStrategy::never(),
            other => return Err(AppError::Config(format!("unknown kp.strategy {other:?}"))),
        };
        strategy.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(strategy)
    }

    pub fn search_config(&self) -> Result<SearchConfig, AppError> {
        let d = SearchConfig::default();
        let cfg = SearchConfig {
            decode: self.decode_params(),
            beam_size: self.search.beam_size.unwrap_or(d.beam_size),
            max_turns: self.search.max_turns.unwrap_or(d.max_turns),
            mode: self.search.mode.unwrap_or(d.mode),
            rerank: self.rerank_config()?,
            kp: self.kp_strategy()?,
            seed: self.seed(),
        };
        cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn docnli_config(&self) -> Result<DocNliConfig, AppError> {
        Ok(DocNliConfig {
            search: self.search_config()?,
            threshold: self.docnli.threshold.unwrap_or(DEFAULT_THRESHOLD),
            use_history: self.docnli.use_history.unwrap_or(true),
            answer_decode: DecodeParams::answering(self.seed()),
        })
    }

    pub fn backend(&self) -> Result<GeneratorHandle, AppError> {
        let b = &self.backend;
        match b.kind.unwrap_or_default() {
            BackendKind::Mock => {
                let script = match &b.script {
                    Some(rel) => {
                        let path = self.base_dir.join(rel);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|source| AppError::Io { path: path.display().to_string(), source })?;
                        serde_json::from_str(&text).map_err(|e| AppError::Parse {
                            path: path.display().to_string(),
                            line: e.line(),
                            message: e.to_string(),
                        })?
                    }
                    None => MockScript::with_seed(self.seed()),
                };
                Ok(GeneratorHandle::Mock(MockBackend::new(script)?))
            }
            BackendKind::Remote => {
                let endpoint = b
                    .endpoint
                    .clone()
                    .ok_or_else(|| AppError::Config(format!("remote backend needs backend.endpoint or {ENDPOINT_ENV}")))?;
                let mut rc = RemoteConfig::new(endpoint);
                if let Some(ms) = b.timeout_ms {
                    rc.timeout = Duration::from_millis(ms);
                }
                let d = RetryPolicy::default();
                rc.retry = RetryPolicy {
                    attempts: b.retries.unwrap_or(d.attempts).max(1),
                    initial_backoff: b.backoff_ms.map(Duration::from_millis).unwrap_or(d.initial_backoff),
                };
                Ok(GeneratorHandle::Remote(RemoteClient::new(rc)))
            }
        }
    }
}
