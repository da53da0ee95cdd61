//! Path-encoding backend and reference enumerations for the beam search.
//!
//! Every candidate answer spells out its path through the search tree
//! (`x`, then one digit per turn), so the turn loss can be any function of
//! the path and the reference needs no knowledge of the prompts.

use std::sync::Arc;

use cqg_core::backend::{Backend, BackendError};
use cqg_core::reranker::{Aggregation, RerankConfig};
use cqg_core::search::{search, SearchConfig, SearchResult};
use cqg_core::{AuxTask, DecodeParams, KpStrategy, Story, TokenScores};

#[derive(Clone)]
pub enum LossFn {
    /// Pseudo-random losses in [0.05, 10.05).
    Spread(u64),
    /// Losses drawn from a small set, so ties are common.
    Levels(u64, Vec<f64>),
}

fn mix(seed: u64, path: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ (h >> 29)
}

impl LossFn {
    pub fn loss(&self, path: &str) -> f64 {
        match self {
            LossFn::Spread(seed) => 0.05 + (mix(*seed, path) % 100_000) as f64 / 10_000.0,
            LossFn::Levels(seed, levels) => levels[(mix(*seed, path) % levels.len() as u64) as usize],
        }
    }
}

pub struct PathBackend {
    pub loss: LossFn,
}

impl Backend for PathBackend {
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError> {
        let history = &input[..input.find("<sep> pose pair:").expect("main-task prompt")];
        let prefix = history.split_whitespace().rfind(|t| t.starts_with('x')).unwrap_or("x");
        let depth = prefix.len();
        Ok((0..params.num_return).map(|j| format!("Turn{depth}? {prefix}{j}")).collect())
    }

    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError> {
        assert!(input.contains("<sep> answer this:"), "only the answering task is enabled");
        TokenScores::from_logprobs(vec![-self.loss.loss(target)]).map_err(BackendError::from)
    }
}

pub fn story(turns: usize) -> Arc<Story> {
    const WORDS: [&str; 6] = ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot"];
    let text: Vec<String> = WORDS[..turns].iter().map(|w| format!("{w} walked home.")).collect();
    Arc::new(Story::new("beam", text.join(" ")).unwrap())
}

/// One turn per sentence, answering-task loss only.
pub fn config(k: usize, beam: usize) -> SearchConfig {
    SearchConfig {
        decode: DecodeParams { num_return: k, ..DecodeParams::default() },
        beam_size: beam,
        kp: KpStrategy::never(),
        rerank: RerankConfig::with_tasks([AuxTask::A], Aggregation::Product),
        seed: 17,
        ..SearchConfig::default()
    }
}

pub fn run(turns: usize, k: usize, beam: usize, loss: &LossFn) -> SearchResult {
    search(story(turns), &config(k, beam), &PathBackend { loss: loss.clone() }).unwrap()
}

fn step_cost(loss: &LossFn, path: &str) -> f64 {
    loss.loss(path).max(1e-9).ln()
}

/// Minimum cumulative log-loss over all `k^turns` flows, as (path, log_L).
pub fn brute_force(turns: usize, k: usize, loss: &LossFn) -> (String, f64) {
    let mut best: Option<(String, f64)> = None;
    for code in 0..k.pow(turns as u32) {
        let mut path = String::from("x");
        let mut c = code;
        let mut digits = Vec::new();
        for _ in 0..turns {
            digits.push(c % k);
            c /= k;
        }
        let mut total = 0.0;
        for d in digits.into_iter().rev() {
            path.push_str(&d.to_string());
            total += step_cost(loss, &path);
        }
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((path, total));
        }
    }
    best.unwrap()
}

/// Per-step beams of a plain turn-synchronous beam search: expand in beam
/// order, stable-sort the pool, keep the first `beam`.
pub fn reference_beams(turns: usize, k: usize, beam: usize, loss: &LossFn) -> Vec<Vec<(String, f64)>> {
    let mut current = vec![(String::from("x"), 0.0)];
    let mut out = Vec::new();
    for _ in 0..turns {
        let mut pool = Vec::new();
        for (path, total) in &current {
            for j in 0..k {
                let child = format!("{path}{j}");
                let cost = total + step_cost(loss, &child);
                pool.push((child, cost));
            }
        }
        pool.sort_by(|a, b| a.1.total_cmp(&b.1));
        pool.truncate(beam);
        out.push(pool.clone());
        current = pool;
    }
    out
}

/// (path, log_L) of each hypothesis in a search beam.
pub fn beam_paths(beam: &[cqg_core::FlowHypothesis]) -> Vec<(String, f64)> {
    beam.iter()
        .map(|h| {
            let path = h.state.history().last().map_or_else(|| "x".to_string(), |p| p.answer.clone());
            (path, h.log_l)
        })
        .collect()
}
