//! Zero-shot document-level entailment by question answering.
//!
//! A series of Q-A pairs is generated over the hypothesis; each question is
//! then answered against the premise. If the premise answers agree with the
//! hypothesis answers (mean token F1 at or above the threshold), the
//! hypothesis is judged entailed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::f1::token_f1;
use super::AppError;
use crate::backend::Backend;
use crate::composer::{compose_input_parts, Payload, TaskKind};
use crate::search::{search, SearchConfig, SearchError, SearchMode};
use crate::types::{DecodeParams, QAPair, Story};

pub const DEFAULT_THRESHOLD: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    NotEntailment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionCheck {
    pub question: String,
    pub answer_hyp: String,
    pub answer_prem: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub label: NliLabel,
    pub mean_f1: f64,
    pub per_question: Vec<QuestionCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocNliConfig {
    pub search: SearchConfig,
    pub threshold: f64,
    /// Pass the hypothesis-side synthetic history when answering on the
    /// premise.
    pub use_history: bool,
    pub answer_decode: DecodeParams,
}

impl Default for DocNliConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let answer_decode = DecodeParams::answering(search.seed);
        Self { search, threshold: DEFAULT_THRESHOLD, use_history: true, answer_decode }
    }
}

/// Threshold decision over per-question checks. An empty series scores 0.
pub fn verdict_from_checks(per_question: Vec<QuestionCheck>, threshold: f64) -> NliVerdict {
    let mean_f1 = if per_question.is_empty() {
        0.0
    } else {
        per_question.iter().map(|c| c.f1).sum::<f64>() / per_question.len() as f64
    };
    let label = if mean_f1 >= threshold { NliLabel::Entailment } else { NliLabel::NotEntailment };
    NliVerdict { label, mean_f1, per_question }
}

/// Generates questions over `hypothesis`, answers them on `premise`, and
/// thresholds the mean answer F1.
pub fn docnli_entail<B: Backend + ?Sized>(
    premise: &str,
    hypothesis: &str,
    cfg: &DocNliConfig,
    backend: &B,
) -> Result<NliVerdict, AppError> {
    let hyp_story = Arc::new(Story::new("hypothesis", hypothesis)?);
    let premise_story = Story::new("premise", premise)?;
    let search_cfg = SearchConfig { mode: SearchMode::Auto, ..cfg.search.clone() };
    let flow = match search(hyp_story, &search_cfg, backend) {
        Ok(res) => res.best,
        Err(SearchError::NoCompleteFlow { best_partial }) => best_partial.best,
        Err(e) => return Err(e.into()),
    };
    let pairs: Vec<QAPair> = flow.state.history().to_vec();

    let mut checks = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let history = if cfg.use_history { &pairs[..i] } else { &[][..] };
        let input = compose_input_parts(TaskKind::A, history, &premise_story, Payload::Question(&pair.question))?;
        let answer_prem = backend
            .generate(&input, &cfg.answer_decode)?
            .into_iter()
            .next()
            .unwrap_or_default()
            .trim()
            .to_string();
        checks.push(QuestionCheck {
            question: pair.question.clone(),
            answer_hyp: pair.answer.clone(),
            f1: token_f1(&answer_prem, &pair.answer),
            answer_prem,
        });
    }
    Ok(verdict_from_checks(checks, cfg.threshold))
}
