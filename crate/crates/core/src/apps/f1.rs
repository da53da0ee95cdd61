//! SQuAD-style token-overlap F1 on a 0-100 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercases, strips ASCII punctuation, drops the articles a/an/the and
/// splits on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token F1 between a predicted and a gold answer, in `[0, 100]`.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred = normalize_answer(pred);
    let gold = normalize_answer(gold);
    if pred.is_empty() && gold.is_empty() {
        return 100.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub count: usize,
    pub mean_f1: f64,
    /// Gold ids without a prediction; each scores 0.
    pub missing: Vec<String>,
}

/// Mean token F1 of predictions against gold answers, matched by id.
pub fn evaluate(pred: &[AnswerRecord], gold: &[AnswerRecord]) -> F1Report {
    let by_id: HashMap<&str, &str> = pred.iter().map(|p| (p.id.as_str(), p.answer.as_str())).collect();
    let mut total = 0.0;
    let mut missing = Vec::new();
    for g in gold {
        match by_id.get(g.id.as_str()) {
            Some(p) => total += token_f1(p, &g.answer),
            None => missing.push(g.id.clone()),
        }
    }
    let mean_f1 = if gold.is_empty() { 0.0 } else { total / gold.len() as f64 };
    F1Report { count: gold.len(), mean_f1, missing }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    #[test]
    fn hand_derived_cases() {
        assert_eq!(token_f1("Yes.", "yes"), 100.0);
        // {small, village} vs {small, village, on, sea}: P = 1, R = 0.5
        assert_eq!(round2(token_f1("a small village", "small village on the sea")), 66.67);
        assert_eq!(token_f1("red apples", "blue sky"), 0.0);
    }

    #[test]
    fn empty_cases() {
        assert_eq!(token_f1("", ""), 100.0);
        assert_eq!(token_f1("the", "a"), 100.0);
        assert_eq!(token_f1("", "x"), 0.0);
        assert_eq!(token_f1("x", "..."), 0.0);
    }

    #[test]
    fn multiset_overlap() {
        // pred {x, x, y}, gold {x, y, y}: common 2, P = R = 2/3
        assert!((token_f1("x x y", "x y y") - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_matches_by_id() {
        let pred = vec![AnswerRecord { id: "1".into(), answer: "yes".into() }];
        let gold = vec![
            AnswerRecord { id: "1".into(), answer: "Yes.".into() },
            AnswerRecord { id: "2".into(), answer: "no".into() },
        ];
        let r = evaluate(&pred, &gold);
        assert_eq!(r.mean_f1, 50.0);
        assert_eq!(r.missing, ["2"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric_and_bounded(a in "[a-c .,]{0,20}", b in "[a-c .,]{0,20}") {
                let f = token_f1(&a, &b);
                prop_assert_eq!(f, token_f1(&b, &a));
                prop_assert!((0.0..=100.0).contains(&f));
            }
        }
    }
}
