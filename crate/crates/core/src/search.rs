//! Sentence-level beam search over question-answer flows, plus the
//! independent / relay / repeat-pose generation conditions.
//!
//! Each search step emits one whole Q-A pair per hypothesis. A flow's cost is
//! the product of its per-turn `loss_rank`, kept in log domain as `log_L`.

use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::{Backend, BackendError};
use crate::composer::{compose_input, normalize_question, AnnotatedStory, ComposeError, Payload, TaskKind};
use crate::reranker::{build_aux_requests, parse_candidates, rerank, score_candidates, RerankConfig, RerankError};
use crate::sampler::{next_rationale, KpStrategy, RationaleDecision, SamplerError};
use crate::types::{turn_log_loss, AuxTask, ContextState, DecodeParams, FlowHypothesis, ScoredCandidate, Story, TypesError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("every candidate was malformed")]
    AllCandidatesMalformed,
    #[error("turn cap reached without a complete flow")]
    NoCompleteFlow { best_partial: Box<SearchResult> },
    #[error("mode {0:?} needs annotated ground-truth turns")]
    MissingAnnotations(SearchMode),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Rerank(RerankError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Types(#[from] TypesError),
}

impl From<RerankError> for SearchError {
    fn from(e: RerankError) -> Self {
        match e {
            RerankError::AllCandidatesMalformed => SearchError::AllCandidatesMalformed,
            RerankError::Backend(b) => SearchError::Backend(b),
            other => SearchError::Rerank(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Rationale sampling plus sentence-level beam search.
    #[default]
    Auto,
    /// Every step composed with an empty history.
    Independent,
    /// Ground-truth history and rationale, one pair per annotated turn.
    Relay,
    /// Ground-truth context, another pair on the same rationale.
    RepeatPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Candidates per step come from `decode.num_return`.
    pub decode: DecodeParams,
    pub beam_size: usize,
    pub max_turns: usize,
    pub mode: SearchMode,
    pub rerank: RerankConfig,
    pub kp: KpStrategy,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            beam_size: 4,
            max_turns: 40,
            mode: SearchMode::Auto,
            rerank: RerankConfig::default(),
            kp: KpStrategy::paper(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn candidates_per_step(&self) -> usize {
        self.decode.num_return
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        self.decode.validate()?;
        self.rerank.validate()?;
        self.kp.validate()?;
        if self.beam_size == 0 {
            return Err(SearchError::InvalidConfig("beam_size must be >= 1".into()));
        }
        if self.max_turns == 0 {
            return Err(SearchError::InvalidConfig("max_turns must be >= 1".into()));
        }
        Ok(())
    }

    /// Decode parameters for one request; the seed is mixed with the flow
    /// and turn so distinct requests sample independently.
    fn decode_for(&self, flow_id: u64, turn: usize) -> DecodeParams {
        DecodeParams { seed: mix(&[self.seed, self.decode.seed, flow_id, turn as u64]), ..self.decode.clone() }
    }
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write_u64(*p);
    }
    h.finish()
}

/// One retained hypothesis at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub story_id: String,
    pub step: usize,
    pub flow_id: u64,
    pub parent_id: Option<u64>,
    pub rationale_index: Option<usize>,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub task_losses: std::collections::BTreeMap<AuxTask, f64>,
    pub loss_rank: Option<f64>,
    #[serde(rename = "log_L")]
    pub log_l: f64,
    pub complete: bool,
}

impl TraceRow {
    fn of(step: usize, hyp: &FlowHypothesis) -> Self {
        let last = hyp.scored.last();
        Self {
            story_id: hyp.state.story().id().to_string(),
            step,
            flow_id: hyp.flow_id,
            parent_id: hyp.parent_id,
            rationale_index: last.map(|s| s.pair.rationale_index),
            question: last.map(|s| s.pair.question.clone()),
            answer: last.map(|s| s.pair.answer.clone()),
            task_losses: last.map(|s| s.task_losses.clone()).unwrap_or_default(),
            loss_rank: last.map(|s| s.loss_rank),
            log_l: hyp.log_l,
            complete: hyp.complete,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: FlowHypothesis,
    /// Retained beam after each step, in rank order.
    pub beams: Vec<Vec<FlowHypothesis>>,
    pub trace: Vec<TraceRow>,
}

fn child_id(parent: u64, turn: usize, index: usize) -> u64 {
    mix(&[parent, turn as u64, index as u64]).max(1)
}

/// Expands one live hypothesis by one turn.
///
/// The sampler picks the next rationale; if it terminates, the hypothesis
/// comes back marked complete with its loss unchanged. Otherwise the main
/// task produces `k` candidates, malformed ones are dropped, and every
/// survivor becomes a child with `log_L + ln(max(loss_rank, 1e-9))`.
pub fn expand<B: Backend + ?Sized>(
    hyp: &FlowHypothesis,
    cfg: &SearchConfig,
    backend: &B,
) -> Result<Vec<FlowHypothesis>, SearchError> {
    let decision = next_rationale(&hyp.state, &cfg.kp, cfg.seed, hyp.flow_id)?;
    let Some(rationale) = decision.rationale() else {
        let mut done = hyp.clone();
        done.complete = true;
        return Ok(vec![done]);
    };
    debug_assert!(!matches!(decision, RationaleDecision::Terminate));

    let turn = hyp.state.turns() + 1;
    let input = compose_input(TaskKind::Main, &hyp.state, Payload::Rationale(rationale))?;
    let texts = backend.generate(&input, &cfg.decode_for(hyp.flow_id, turn))?;
    let parsed = parse_candidates(&texts, turn, rationale);
    if parsed.is_empty() {
        return Err(SearchError::AllCandidatesMalformed);
    }
    let pairs: Vec<_> = parsed.iter().map(|(_, p)| p.clone()).collect();
    let scored = score_candidates(&hyp.state, &pairs, backend, &cfg.rerank)?;

    parsed
        .iter()
        .zip(scored)
        .map(|((gen_index, _), sc)| {
            let loss_h = history_loss(&hyp.state, &sc, cfg, backend)?;
            let state = hyp.state.append(sc.pair.clone(), loss_h)?;
            let mut scored_turns = hyp.scored.clone();
            let log_l = hyp.log_l + turn_log_loss(sc.loss_rank);
            scored_turns.push(ScoredCandidate { pair: state.history()[turn - 1].clone(), ..sc });
            Ok(FlowHypothesis {
                flow_id: child_id(hyp.flow_id, turn, *gen_index),
                parent_id: Some(hyp.flow_id),
                state,
                scored: scored_turns,
                log_l,
                complete: false,
            })
        })
        .collect()
}

/// History-task loss of the accepted pair: reused from reranking when
/// available, scored separately only if the keeping strategy needs it.
fn history_loss<B: Backend + ?Sized>(
    before: &ContextState,
    sc: &ScoredCandidate,
    cfg: &SearchConfig,
    backend: &B,
) -> Result<Option<f64>, SearchError> {
    if let Some(&h) = sc.task_losses.get(&AuxTask::H) {
        return Ok(Some(h));
    }
    if !cfg.kp.needs_history_loss() {
        return Ok(None);
    }
    let reqs = build_aux_requests(before, &sc.pair, &[AuxTask::H].into_iter().collect())?;
    let req = &reqs[&AuxTask::H];
    Ok(Some(backend.score(&req.input, &req.target)?.mean_nll))
}

/// Keeps the `beam_size` lowest-`log_L` hypotheses; ties keep pool order.
pub fn retain(mut pool: Vec<FlowHypothesis>, beam_size: usize) -> Vec<FlowHypothesis> {
    // sort_by is stable
    pool.sort_by(|a, b| a.log_l.total_cmp(&b.log_l));
    pool.truncate(beam_size);
    pool
}

/// Turn-synchronous sentence-level beam search over `story`.
pub fn search<B: Backend + ?Sized>(story: Arc<Story>, cfg: &SearchConfig, backend: &B) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut beam = vec![FlowHypothesis::root(story)];
    let mut beams = Vec::new();
    let mut trace = Vec::new();
    let mut step = 0;
    while beam.iter().any(|h| !h.complete && h.state.turns() < cfg.max_turns) {
        step += 1;
        let expansions: Vec<Result<Vec<FlowHypothesis>, SearchError>> = beam
            .par_iter()
            .map(|h| if h.complete { Ok(vec![h.clone()]) } else { expand(h, cfg, backend) })
            .collect();
        let mut pool = Vec::new();
        for (parent, result) in beam.iter().zip(expansions) {
            match result {
                Ok(children) => pool.extend(children),
                Err(SearchError::AllCandidatesMalformed) => {
                    warn!(flow_id = parent.flow_id, step, "all candidates malformed; dropping hypothesis");
                }
                Err(e) => return Err(e),
            }
        }
        if pool.is_empty() {
            return Err(SearchError::AllCandidatesMalformed);
        }
        beam = retain(pool, cfg.beam_size);
        trace.extend(beam.iter().map(|h| TraceRow::of(step, h)));
        beams.push(beam.clone());
    }

    let best_complete = beam.iter().filter(|h| h.complete).min_by(|a, b| a.log_l.total_cmp(&b.log_l)).cloned();
    match best_complete {
        Some(best) => Ok(SearchResult { best, beams, trace }),
        None => {
            let best = beam[0].clone();
            Err(SearchError::NoCompleteFlow { best_partial: Box::new(SearchResult { best, beams, trace }) })
        }
    }
}

/// A generated flow for one story under any mode.
#[derive(Debug, Clone)]
pub struct GeneratedFlow {
    pub story: Arc<Story>,
    pub turns: Vec<ScoredCandidate>,
    pub log_l: f64,
    /// False only for a search that hit the turn cap.
    pub complete: bool,
}

impl GeneratedFlow {
    fn from_hypothesis(h: FlowHypothesis) -> Self {
        Self { story: h.state.story_arc().clone(), turns: h.scored, log_l: h.log_l, complete: h.complete }
    }

    fn from_turns(story: Arc<Story>, turns: Vec<ScoredCandidate>) -> Self {
        let log_l = turns.iter().map(|t| turn_log_loss(t.loss_rank)).sum();
        Self { story, turns, log_l, complete: true }
    }
}

/// Generates one flow over `input` under `cfg.mode`.
///
/// `auto` runs [`search`]; a capped search yields its best partial flow
/// marked incomplete. `independent` walks the sentences in order, composing
/// each step with an empty history; the returned turns still carry their
/// position in the synthetic series. `relay` and `repeat_pose` follow the
/// annotated turns.
pub fn run_condition<B: Backend + ?Sized>(
    input: &AnnotatedStory,
    cfg: &SearchConfig,
    backend: &B,
) -> Result<GeneratedFlow, SearchError> {
    cfg.validate()?;
    match cfg.mode {
        SearchMode::Auto => {
            let story = Arc::new(Story::new(input.id.clone(), input.story.clone())?);
            match search(story, cfg, backend) {
                Ok(res) => Ok(GeneratedFlow::from_hypothesis(res.best)),
                Err(SearchError::NoCompleteFlow { best_partial }) => {
                    warn!(story = %input.id, "turn cap reached; keeping best partial flow");
                    Ok(GeneratedFlow::from_hypothesis(best_partial.best))
                }
                Err(e) => Err(e),
            }
        }
        SearchMode::Independent => {
            let story = Arc::new(Story::new(input.id.clone(), input.story.clone())?);
            let empty = ContextState::new(story.clone());
            let mut turns = Vec::new();
            for rationale in 0..story.len() {
                let turn = turns.len() + 1;
                let input = compose_input(TaskKind::Main, &empty, Payload::Rationale(rationale))?;
                let texts = backend.generate(&input, &cfg.decode_for(0, turn))?;
                let pairs: Vec<_> = parse_candidates(&texts, turn, rationale).into_iter().map(|(_, p)| p).collect();
                match rerank(&empty, &pairs, backend, &cfg.rerank) {
                    Ok(mut ranked) => turns.push(ranked.swap_remove(0)),
                    Err(RerankError::AllCandidatesMalformed) => {
                        warn!(story = %story.id(), rationale, "all candidates malformed; skipping sentence");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if turns.is_empty() {
                return Err(SearchError::AllCandidatesMalformed);
            }
            for (i, t) in turns.iter_mut().enumerate() {
                t.pair.turn = i + 1;
            }
            Ok(GeneratedFlow::from_turns(story, turns))
        }
        SearchMode::Relay | SearchMode::RepeatPose => {
            let (story, truth) = input.resolve()?;
            if truth.is_empty() {
                return Err(SearchError::MissingAnnotations(cfg.mode));
            }
            let mut turns = Vec::new();
            for (i, gold) in truth.iter().enumerate() {
                let context = ContextState::from_history(story.clone(), &truth[..i])?;
                let main = compose_input(TaskKind::Main, &context, Payload::Rationale(gold.rationale_index))?;
                let texts = backend.generate(&main, &cfg.decode_for(0, gold.turn))?;
                let mut pairs: Vec<_> =
                    parse_candidates(&texts, gold.turn, gold.rationale_index).into_iter().map(|(_, p)| p).collect();
                if cfg.mode == SearchMode::RepeatPose {
                    let original = normalize_question(&gold.question).to_lowercase();
                    let fresh: Vec<_> =
                        pairs.iter().filter(|p| p.question.to_lowercase() != original).cloned().collect();
                    if !fresh.is_empty() {
                        pairs = fresh;
                    }
                }
                match rerank(&context, &pairs, backend, &cfg.rerank) {
                    Ok(mut ranked) => turns.push(ranked.swap_remove(0)),
                    Err(RerankError::AllCandidatesMalformed) => {
                        warn!(story = %story.id(), turn = gold.turn, "all candidates malformed; skipping turn");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if turns.is_empty() {
                return Err(SearchError::AllCandidatesMalformed);
            }
            Ok(GeneratedFlow::from_turns(story, turns))
        }
    }
}
