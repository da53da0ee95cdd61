//! Synthetic conversational QA corpus generation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use super::AppError;
use crate::backend::Backend;
use crate::composer::AnnotatedStory;
use crate::search::{run_condition, GeneratedFlow, SearchConfig};
use crate::types::AuxTask;

/// One synthetic turn, as written to the output JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub story_id: String,
    pub turn: usize,
    pub question: String,
    pub answer: String,
    pub rationale_index: usize,
    pub rationale: String,
    pub loss_rank: f64,
    pub task_losses: BTreeMap<AuxTask, f64>,
}

pub fn flow_records(flow: &GeneratedFlow) -> Vec<AugmentRecord> {
    flow.turns
        .iter()
        .map(|t| AugmentRecord {
            story_id: flow.story.id().to_string(),
            turn: t.pair.turn,
            question: t.pair.question.clone(),
            answer: t.pair.answer.clone(),
            rationale_index: t.pair.rationale_index,
            rationale: flow.story.sentence(t.pair.rationale_index).map(|s| s.text.clone()).unwrap_or_default(),
            loss_rank: t.loss_rank,
            task_losses: t.task_losses.clone(),
        })
        .collect()
}

/// Outcome of a corpus run: records in passage order plus the ids of
/// passages that failed.
#[derive(Debug, Clone, Default)]
pub struct CorpusOutput {
    pub records: Vec<AugmentRecord>,
    pub failed: Vec<String>,
}

/// Generates flows for all passages on a pool of `workers` threads.
///
/// Output order follows input order regardless of scheduling. A failing
/// passage is logged and skipped; the run fails only if every passage does.
pub fn synthesize_corpus<B: Backend + ?Sized>(
    passages: &[AnnotatedStory],
    cfg: &SearchConfig,
    backend: &B,
    workers: usize,
) -> Result<CorpusOutput, AppError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AppError::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> =
        pool.install(|| passages.par_iter().map(|p| (p.id.clone(), run_condition(p, cfg, backend))).collect());

    let mut out = CorpusOutput::default();
    for (id, res) in results {
        match res {
            Ok(flow) => {
                info!(story = %id, turns = flow.turns.len(), complete = flow.complete, "flow generated");
                out.records.extend(flow_records(&flow));
            }
            Err(e) => {
                warn!(story = %id, error = %e, "passage failed");
                out.failed.push(id);
            }
        }
    }
    if !passages.is_empty() && out.failed.len() == passages.len() {
        return Err(AppError::AllPassagesFailed(passages.len()));
    }
    Ok(out)
}

/// Concatenates original and synthetic rows, tagging each with its
/// provenance. Originals come first.
pub fn merge_records(original: &[Value], synthetic: &[AugmentRecord]) -> Result<Vec<Value>, AppError> {
    let tag = |mut v: Value, source: &str| -> Result<Value, AppError> {
        match v.as_object_mut() {
            Some(obj) => {
                obj.insert("provenance".into(), Value::String(source.into()));
                Ok(v)
            }
            None => Err(AppError::Config("merge input rows must be JSON objects".into())),
        }
    };
    let mut out = Vec::with_capacity(original.len() + synthetic.len());
    for v in original {
        out.push(tag(v.clone(), "original")?);
    }
    for r in synthetic {
        let v = serde_json::to_value(r).map_err(|e| AppError::Config(e.to_string()))?;
        out.push(tag(v, "synthetic")?);
    }
    Ok(out)
}
