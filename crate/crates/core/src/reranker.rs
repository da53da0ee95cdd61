//! Self-reranking: every candidate pair is scored by the same model on the
//! four auxiliary tasks, and the per-task mean losses are aggregated into a
//! single `loss_rank` (lower is better).

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::composer::{compose_input, compose_target, parse_main_output, ComposeError, Payload, TaskKind};
use crate::types::{AuxTask, ContextState, QAPair, ScoredCandidate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerankError {
    #[error("missing loss for task {0}")]
    MissingTaskLoss(AuxTask),
    #[error("loss for task {task} must be finite and >= 0, got {value}")]
    InvalidLoss { task: AuxTask, value: f64 },
    #[error("every candidate was malformed")]
    AllCandidatesMalformed,
    #[error("no auxiliary task enabled")]
    NoTasks,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Product,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    /// When false, no auxiliary scoring happens: every candidate gets
    /// `loss_rank = 1` and generation order decides.
    pub enabled: bool,
    pub tasks: BTreeSet<AuxTask>,
    pub aggregation: Aggregation,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { enabled: true, tasks: AuxTask::ALL.into_iter().collect(), aggregation: Aggregation::Product }
    }
}

impl RerankConfig {
    pub fn with_tasks(tasks: impl IntoIterator<Item = AuxTask>, aggregation: Aggregation) -> Self {
        Self { enabled: true, tasks: tasks.into_iter().collect(), aggregation }
    }

    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.enabled && self.tasks.is_empty() {
            return Err(RerankError::NoTasks);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxRequest {
    pub input: String,
    pub target: String,
}

/// The scoring requests for `cand` as the turn following `context`.
pub fn build_aux_requests(
    context: &ContextState,
    cand: &QAPair,
    tasks: &BTreeSet<AuxTask>,
) -> Result<BTreeMap<AuxTask, AuxRequest>, ComposeError> {
    tasks
        .iter()
        .map(|&task| {
            let payload = match task {
                AuxTask::A => Payload::Question(&cand.question),
                AuxTask::Q => Payload::Answer(&cand.answer),
                AuxTask::R => Payload::QuestionAnswer(&cand.question, &cand.answer),
                AuxTask::H => Payload::Turn(cand),
            };
            let kind = TaskKind::from(task);
            let req = AuxRequest {
                input: compose_input(kind, context, payload)?,
                target: compose_target(kind, context, cand)?,
            };
            Ok((task, req))
        })
        .collect()
}

/// Aggregates the enabled tasks' losses: product or sum.
pub fn aggregate(task_losses: &BTreeMap<AuxTask, f64>, cfg: &RerankConfig) -> Result<f64, RerankError> {
    if cfg.tasks.is_empty() {
        return Err(RerankError::NoTasks);
    }
    let mut acc = match cfg.aggregation {
        Aggregation::Product => 1.0,
        Aggregation::Sum => 0.0,
    };
    for &task in &cfg.tasks {
        let value = *task_losses.get(&task).ok_or(RerankError::MissingTaskLoss(task))?;
        if !value.is_finite() || value < 0.0 {
            return Err(RerankError::InvalidLoss { task, value });
        }
        match cfg.aggregation {
            Aggregation::Product => acc *= value,
            Aggregation::Sum => acc += value,
        }
    }
    Ok(acc)
}

/// Indices of `loss_ranks` in ascending order; equal values keep their
/// original relative order.
pub fn rank_order(loss_ranks: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..loss_ranks.len()).collect();
    idx.sort_by(|&a, &b| loss_ranks[a].total_cmp(&loss_ranks[b]));
    idx
}

/// Parses raw main-task outputs into pairs for `turn` on `rationale_index`,
/// dropping malformed ones. Returns `(generation index, pair)`.
pub fn parse_candidates(texts: &[String], turn: usize, rationale_index: usize) -> Vec<(usize, QAPair)> {
    texts
        .iter()
        .enumerate()
        .filter_map(|(i, text)| {
            let (q, a) = parse_main_output(text).ok()?;
            QAPair::new(turn, q, a, rationale_index).ok().map(|p| (i, p))
        })
        .collect()
}

/// Scores every candidate (in generation order, not yet sorted).
pub fn score_candidates<B: Backend + ?Sized>(
    context: &ContextState,
    candidates: &[QAPair],
    backend: &B,
    cfg: &RerankConfig,
) -> Result<Vec<ScoredCandidate>, RerankError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(candidates
            .iter()
            .map(|pair| ScoredCandidate { pair: pair.clone(), task_losses: BTreeMap::new(), loss_rank: 1.0 })
            .collect());
    }
    let requests: Vec<(usize, AuxTask, AuxRequest)> = candidates
        .iter()
        .enumerate()
        .map(|(i, cand)| Ok(build_aux_requests(context, cand, &cfg.tasks)?.into_iter().map(move |(t, r)| (i, t, r))))
        .collect::<Result<Vec<_>, ComposeError>>()?
        .into_iter()
        .flatten()
        .collect();
    let losses: Vec<(usize, AuxTask, f64)> = requests
        .par_iter()
        .map(|(i, task, req)| backend.score(&req.input, &req.target).map(|s| (*i, *task, s.mean_nll)))
        .collect::<Result<_, BackendError>>()?;

    let mut per_candidate: Vec<BTreeMap<AuxTask, f64>> = vec![BTreeMap::new(); candidates.len()];
    for (i, task, loss) in losses {
        per_candidate[i].insert(task, loss);
    }
    candidates
        .iter()
        .zip(per_candidate)
        .map(|(pair, task_losses)| {
            let loss_rank = aggregate(&task_losses, cfg)?;
            Ok(ScoredCandidate { pair: pair.clone(), task_losses, loss_rank })
        })
        .collect()
}

/// Scores and sorts candidates ascending by `loss_rank`; element 0 is the
/// selected pair.
pub fn rerank<B: Backend + ?Sized>(
    context: &ContextState,
    candidates: &[QAPair],
    backend: &B,
    cfg: &RerankConfig,
) -> Result<Vec<ScoredCandidate>, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::AllCandidatesMalformed);
    }
    let scored = score_candidates(context, candidates, backend, cfg)?;
    let ranks: Vec<f64> = scored.iter().map(|s| s.loss_rank).collect();
    let mut slots: Vec<Option<ScoredCandidate>> = scored.into_iter().map(Some).collect();
    Ok(rank_order(&ranks).into_iter().map(|i| slots[i].take().expect("each index once")).collect())
}
