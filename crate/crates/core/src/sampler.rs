//! Rationale sampling: after each turn, decide whether the next question
//! stays on the current sentence (with keeping probability `kp`) or moves
//! on to the next one.
//!
//! The default strategy derives `kp` from `a`, an estimate of the
//! information still left in the current rationale, computed from the
//! history-task losses already gathered during reranking:
//!
//! ```text
//! a = (m_n * loss_h_n - m_n' * loss_h_n') / (m_n - m_n')
//! ```
//!
//! where `n'` is the latest turn whose rationale differs from turn `n`'s and
//! `m_i` is the token length of the covered text after turn `i`.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{whitespace_tokens, ContextState};

/// Upper bound of every keeping probability.
pub const KP_MAX: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("history loss missing for turn {0}")]
    MissingHistoryLoss(usize),
    #[error("turn {n} out of range (context has {turns} turns)")]
    TurnOutOfRange { n: usize, turns: usize },
    #[error("invalid keeping-probability strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum KpStrategy {
    /// `kp = clamp(slope * a, 0, cap)`, with `kp = 0` for `a <= 0`.
    Paper { slope: f64, cap: f64 },
    /// Fixed `kp`.
    Constant { value: f64 },
    /// `kp = min(slope * x, cap)` where `x` is the rationale's share of the
    /// story length in tokens.
    Length { slope: f64, cap: f64 },
}

impl Default for KpStrategy {
    fn default() -> Self {
        Self::paper()
    }
}

impl KpStrategy {
    pub fn paper() -> Self {
        KpStrategy::Paper { slope: 0.2, cap: 0.75 }
    }

    pub fn constant() -> Self {
        KpStrategy::Constant { value: 0.3 }
    }

    pub fn length() -> Self {
        KpStrategy::Length { slope: 3.0, cap: 0.75 }
    }

    /// One question per sentence.
    pub fn never() -> Self {
        KpStrategy::Constant { value: 0.0 }
    }

    pub fn needs_history_loss(&self) -> bool {
        matches!(self, KpStrategy::Paper { .. })
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let in_range = |v: f64| v.is_finite() && (0.0..=KP_MAX).contains(&v);
        let ok = match *self {
            KpStrategy::Paper { slope, cap } | KpStrategy::Length { slope, cap } => {
                slope.is_finite() && slope >= 0.0 && in_range(cap)
            }
            KpStrategy::Constant { value } => in_range(value),
        };
        if ok {
            Ok(())
        } else {
            Err(SamplerError::InvalidStrategy(format!("{self:?}: probabilities must stay within [0, {KP_MAX}]")))
        }
    }
}

/// Keeping probability for input `x`: the remaining-information estimate
/// `a` for the default strategy, the length ratio for the length strategy;
/// ignored by the constant strategy.
pub fn kp(x: f64, strategy: &KpStrategy) -> f64 {
    match *strategy {
        KpStrategy::Paper { slope, cap } => {
            if x.is_nan() || x <= 0.0 {
                0.0
            } else {
                (slope * x).min(cap)
            }
        }
        KpStrategy::Constant { value } => value,
        KpStrategy::Length { slope, cap } => {
            if x.is_nan() || x <= 0.0 {
                0.0
            } else {
                (slope * x).min(cap)
            }
        }
    }
}

/// Remaining-information estimate `a` after turn `n` (1-based).
///
/// When every earlier turn shares turn `n`'s rationale, `n'` is taken as
/// turn 0 with `m_0 = 0`, so `a = loss_h_n`; this includes `n = 1`.
/// Returns 0 when `m_n == m_n'`.
pub fn compute_a(context: &ContextState, n: usize) -> Result<f64, SamplerError> {
    let turns = context.turns();
    if n == 0 || n > turns {
        return Err(SamplerError::TurnOutOfRange { n, turns });
    }
    let history = context.history();
    let loss_at = |turn: usize| context.loss_h_per_turn()[turn - 1].ok_or(SamplerError::MissingHistoryLoss(turn));
    let loss_n = loss_at(n)?;
    if n == 1 {
        return Ok(loss_n);
    }
    let m = context.m_per_turn();
    let m_n = m[n - 1] as f64;
    let rationale = history[n - 1].rationale_index;
    let prior = (1..n).rev().find(|&i| history[i - 1].rationale_index != rationale);
    let (m_prev, loss_prev) = match prior {
        Some(i) => (m[i - 1] as f64, loss_at(i)?),
        None => (0.0, 0.0),
    };
    if m_n == m_prev {
        return Ok(0.0);
    }
    Ok((m_n * loss_n - m_prev * loss_prev) / (m_n - m_prev))
}

/// Keeping probability for the turn after the last one in `context`.
pub fn keep_probability(context: &ContextState, strategy: &KpStrategy) -> Result<f64, SamplerError> {
    let n = context.turns();
    match strategy {
        KpStrategy::Constant { .. } => Ok(kp(0.0, strategy)),
        KpStrategy::Paper { .. } => Ok(kp(compute_a(context, n)?, strategy)),
        KpStrategy::Length { .. } => {
            let current = context.current_rationale().ok_or(SamplerError::TurnOutOfRange { n, turns: n })?;
            let story = context.story();
            let total = whitespace_tokens(story.text()).max(1) as f64;
            let x = whitespace_tokens(&story.sentences()[current].text) as f64 / total;
            Ok(kp(x, strategy))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "rationale", rename_all = "lowercase")]
pub enum RationaleDecision {
    Keep(usize),
    /// Move to the given sentence. The first turn always advances to 0.
    Advance(usize),
    Terminate,
}

impl RationaleDecision {
    pub fn rationale(self) -> Option<usize> {
        match self {
            RationaleDecision::Keep(i) | RationaleDecision::Advance(i) => Some(i),
            RationaleDecision::Terminate => None,
        }
    }
}

/// Keep when `u < kp`, else advance; advancing past the last sentence
/// terminates.
pub fn decide(current: Option<usize>, num_sentences: usize, kp: f64, u: f64) -> RationaleDecision {
    let Some(current) = current else {
        return RationaleDecision::Advance(0);
    };
    if u < kp {
        RationaleDecision::Keep(current)
    } else if current + 1 < num_sentences {
        RationaleDecision::Advance(current + 1)
    } else {
        RationaleDecision::Terminate
    }
}

/// Uniform draw in `[0, 1)` for one decision of one flow. A pure function
/// of `(seed, flow_id, turn)`.
pub fn draw_uniform(seed: u64, flow_id: u64, turn: usize) -> f64 {
    let mut h = FnvHasher::default();
    h.write(b"rationale");
    h.write_u64(seed);
    h.write_u64(flow_id);
    h.write_usize(turn);
    ChaCha8Rng::seed_from_u64(h.finish()).gen::<f64>()
}

/// Decides the rationale of the turn following `context`.
pub fn next_rationale(
    context: &ContextState,
    strategy: &KpStrategy,
    seed: u64,
    flow_id: u64,
) -> Result<RationaleDecision, SamplerError> {
    let n = context.story().len();
    if context.turns() == 0 {
        return Ok(decide(None, n, 0.0, 0.0));
    }
    let p = keep_probability(context, strategy)?;
    let u = draw_uniform(seed, flow_id, context.turns());
    Ok(decide(context.current_rationale(), n, p, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{QAPair, Story};
    use std::sync::Arc;

    fn story() -> Arc<Story> {
        // sentence token counts: 3, 4, 5
        Arc::new(Story::new("s", "One two three. Four five six seven. Eight nine ten eleven twelve.").unwrap())
    }

    fn state(turns: &[(usize, Option<f64>)]) -> ContextState {
        let mut st = ContextState::new(story());
        for &(r, loss) in turns {
            st = st.append(QAPair::new(1, "Q?", "A.", r).unwrap(), loss).unwrap();
        }
        st
    }

    #[test]
    fn kp_default_branches() {
        let s = KpStrategy::paper();
        assert_eq!(kp(-0.5, &s), 0.0);
        assert_eq!(kp(2.0, &s), 0.4);
        assert_eq!(kp(10.0, &s), 0.75);
        assert_eq!(kp(3.75, &s), 0.75);
        assert_eq!(kp(f64::NAN, &s), 0.0);
        assert_eq!(kp(f64::INFINITY, &s), 0.75);
    }

    #[test]
    fn kp_alternatives() {
        assert_eq!(kp(123.0, &KpStrategy::constant()), 0.3);
        assert!((kp(0.1, &KpStrategy::length()) - 0.3).abs() < 1e-12);
        assert_eq!(kp(0.5, &KpStrategy::length()), 0.75);
        assert_eq!(kp(0.25, &KpStrategy::length()), 0.75);
    }

    #[test]
    fn strategy_validation() {
        assert!(KpStrategy::paper().validate().is_ok());
        assert!(KpStrategy::Constant { value: 0.9 }.validate().is_err());
        assert!(KpStrategy::Paper { slope: 0.2, cap: 1.0 }.validate().is_err());
    }

    #[test]
    fn a_first_turn_is_history_loss() {
        assert_eq!(compute_a(&state(&[(0, Some(2.5))]), 1).unwrap(), 2.5);
    }

    #[test]
    fn a_direct_evaluation() {
        // m after turn 1 = 3, after turn 2 = 7 (sentences 0 and 1)
        let st = state(&[(0, Some(1.0)), (1, Some(2.0))]);
        let expected = (7.0 * 2.0 - 3.0 * 1.0) / (7.0 - 3.0);
        assert_eq!(compute_a(&st, 2).unwrap(), expected);
    }

    #[test]
    fn a_degenerate_is_zero() {
        // turn 3 re-covers sentence 0 after sentence 1: m stays 7
        let st = state(&[(0, Some(1.0)), (1, Some(2.0)), (0, Some(3.0))]);
        assert_eq!(compute_a(&st, 3).unwrap(), 0.0);
    }

    #[test]
    fn a_without_distinct_prior_uses_zero_baseline() {
        let st = state(&[(0, Some(1.0)), (0, Some(1.7))]);
        assert_eq!(compute_a(&st, 2).unwrap(), 1.7);
    }

    #[test]
    fn a_missing_loss() {
        let st = state(&[(0, Some(1.0)), (1, None)]);
        assert_eq!(compute_a(&st, 2), Err(SamplerError::MissingHistoryLoss(2)));
        let st = state(&[(0, None), (1, Some(1.0))]);
        assert_eq!(compute_a(&st, 2), Err(SamplerError::MissingHistoryLoss(1)));
        assert!(matches!(compute_a(&st, 3), Err(SamplerError::TurnOutOfRange { .. })));
    }

    #[test]
    fn a_telescopes_over_same_rationale_turns() {
        let base = state(&[(0, Some(1.3)), (1, Some(0.9)), (1, Some(5.0)), (1, Some(2.2))]);
        let other = state(&[(0, Some(1.3)), (1, Some(0.1)), (1, Some(9.0)), (1, Some(2.2))]);
        assert_eq!(compute_a(&base, 4).unwrap(), compute_a(&other, 4).unwrap());
    }

    #[test]
    fn decisions() {
        assert_eq!(decide(None, 3, 0.75, 0.0), RationaleDecision::Advance(0));
        assert_eq!(decide(Some(1), 3, 0.0, 0.0), RationaleDecision::Advance(2));
        assert_eq!(decide(Some(1), 3, 0.75, 0.5), RationaleDecision::Keep(1));
        assert_eq!(decide(Some(2), 3, 0.75, 0.9), RationaleDecision::Terminate);
        assert_eq!(decide(Some(2), 3, 0.75, 0.1), RationaleDecision::Keep(2));
    }

    #[test]
    fn zero_kp_always_advances() {
        let st = state(&[(0, Some(1.0))]);
        for flow in 0..200 {
            assert_eq!(next_rationale(&st, &KpStrategy::never(), 1, flow).unwrap(), RationaleDecision::Advance(1));
        }
    }

    #[test]
    fn length_strategy_uses_current_sentence_share() {
        let st = state(&[(2, None)]);
        let p = keep_probability(&st, &KpStrategy::length()).unwrap();
        assert_eq!(p, 0.75); // 5/12 > 0.25
        let st = state(&[(0, None)]);
        assert!((keep_probability(&st, &KpStrategy::length()).unwrap() - 0.75).abs() < 1e-12); // 3/12 = 0.25
    }

    #[test]
    fn draws_are_pure_and_uniformish() {
        assert_eq!(draw_uniform(1, 2, 3), draw_uniform(1, 2, 3));
        assert_ne!(draw_uniform(1, 2, 3), draw_uniform(1, 2, 4));
        let mean: f64 = (0..10_000).map(|i| draw_uniform(9, i, 1)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn default_kp_bounded_and_monotone(a in -100.0f64..100.0, b in -100.0f64..100.0) {
                let s = KpStrategy::paper();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!((0.0..=0.75).contains(&kp(lo, &s)));
                prop_assert!(kp(lo, &s) <= kp(hi, &s));
            }
        }
    }
}
