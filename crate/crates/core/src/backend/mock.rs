use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_generate_request, check_score_request, Backend, BackendError};
use crate::composer::{PROMPT_ANSWER, PROMPT_HISTORY, PROMPT_MAIN, PROMPT_QUESTION, PROMPT_RATIONALE, SEP};
use crate::types::{split_sentences, DecodeParams, TokenScores};

/// Range of the synthetic per-token losses produced by the fallback rule.
pub const FALLBACK_LOSS_RANGE: (f64, f64) = (0.2, 6.0);

/// Scripted candidates for a generate request. Exactly one of `input` and
/// `input_contains` selects the requests it answers; `num_return`, when set,
/// restricts the rule to that request size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_return: Option<usize>,
    pub candidates: Vec<String>,
}

/// Scripted scores. Each of `input`, `input_contains` and `target` that is
/// set must match; unset ones match anything. Either give the full
/// `token_logprobs` or a single `mean_nll`, which becomes a one-token score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_nll: Option<f64>,
}

impl ScoreRule {
    pub fn loss(target: impl Into<String>, mean_nll: f64) -> Self {
        Self { input: None, input_contains: None, target: Some(target.into()), token_logprobs: None, mean_nll: Some(mean_nll) }
    }

    /// Any target scored under an input containing `needle`.
    pub fn loss_when_input_contains(needle: impl Into<String>, mean_nll: f64) -> Self {
        Self { input: None, input_contains: Some(needle.into()), target: None, token_logprobs: None, mean_nll: Some(mean_nll) }
    }

    fn matches(&self, input: &str, target: &str) -> bool {
        self.input.as_deref().is_none_or(|i| i == input)
            && self.input_contains.as_deref().is_none_or(|n| input.contains(n))
            && self.target.as_deref().is_none_or(|t| t == target)
    }
}

fn default_true() -> bool {
    true
}

/// Lookup tables for the mock backend plus the seed of its fallback rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub fallback: bool,
    #[serde(default)]
    pub generate: Vec<GenerateRule>,
    #[serde(default)]
    pub score: Vec<ScoreRule>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self { seed: 0, fallback: true, generate: Vec::new(), score: Vec::new() }
    }
}

impl MockScript {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Deterministic backend driven by a [`MockScript`].
///
/// Lookups go exact input first, then the first matching rule in script
/// order, then (if enabled) the fallback rule. The fallback is a pure
/// function of `(seed, input, target)` for scores and of
/// `(seed, input, params.seed, index)` for candidates.
///
/// Fallback generation reads the prompt: for the main task it asks about a
/// short span of the rationale sentence and answers it, and for the answering
/// task it returns the question's content words as found in the story. Both
/// use the same answering rule, so the mock is self-consistent: answering a
/// question it posed over the same story reproduces its own answer.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    exact_generate: HashMap<(String, Option<usize>), usize>,
    exact_score: HashMap<(String, String), usize>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        let mut exact_generate = HashMap::new();
        for (i, rule) in script.generate.iter().enumerate() {
            match (&rule.input, &rule.input_contains) {
                (Some(input), None) => {
                    exact_generate.entry((input.clone(), rule.num_return)).or_insert(i);
                }
                (None, Some(_)) => {}
                _ => {
                    return Err(BackendError::InvalidRequest(format!(
                        "generate rule {i} needs exactly one of input / input_contains"
                    )))
                }
            }
            if rule.candidates.is_empty() {
                return Err(BackendError::InvalidRequest(format!("generate rule {i} has no candidates")));
            }
        }
        let mut exact_score = HashMap::new();
        for (i, rule) in script.score.iter().enumerate() {
            if rule.input.is_some() && rule.input_contains.is_some() {
                return Err(BackendError::InvalidRequest(format!(
                    "score rule {i} sets both input and input_contains"
                )));
            }
            match (&rule.token_logprobs, rule.mean_nll) {
                (Some(v), None) if !v.is_empty() => {}
                (None, Some(m)) if m.is_finite() && m >= 0.0 => {}
                _ => {
                    return Err(BackendError::InvalidRequest(format!(
                        "score rule {i} needs nonempty token_logprobs or a nonnegative mean_nll"
                    )))
                }
            }
            if let (Some(input), Some(target)) = (&rule.input, &rule.target) {
                exact_score.entry((input.clone(), target.clone())).or_insert(i);
            }
        }
        Ok(Self { script, exact_generate, exact_score })
    }

    /// A mock with no scripted entries; everything comes from the fallback.
    pub fn fallback_only(seed: u64) -> Self {
        Self::new(MockScript::with_seed(seed)).expect("empty script is valid")
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn lookup_generate(&self, input: &str, n: usize) -> Option<&GenerateRule> {
        let exact = self
            .exact_generate
            .get(&(input.to_string(), Some(n)))
            .or_else(|| self.exact_generate.get(&(input.to_string(), None)));
        if let Some(&i) = exact {
            return Some(&self.script.generate[i]);
        }
        self.script.generate.iter().find(|r| {
            r.input_contains.as_deref().is_some_and(|needle| input.contains(needle))
                && r.num_return.is_none_or(|k| k == n)
        })
    }

    fn lookup_score(&self, input: &str, target: &str) -> Option<&ScoreRule> {
        if let Some(&i) = self.exact_score.get(&(input.to_string(), target.to_string())) {
            return Some(&self.script.score[i]);
        }
        self.script.score.iter().find(|r| r.matches(input, target))
    }

    fn rng(&self, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write_u64(self.script.seed);
        for p in parts {
            h.write_usize(p.len());
            h.write(p);
        }
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    fn fallback_candidate(&self, input: &str, params: &DecodeParams, index: usize) -> String {
        let mut rng = self.rng(&[b"generate", input.as_bytes(), &params.seed.to_le_bytes(), &index.to_le_bytes()]);
        match parse_prompt(input) {
            Some(Prompt::Main { rationale, story }) => {
                let words = content_words(rationale);
                let pool = if words.is_empty() { plain_words(rationale) } else { words };
                if pool.is_empty() {
                    return format!("What is this about? {}", rationale.trim());
                }
                let start = rng.gen_range(0..pool.len());
                let len = rng.gen_range(1..=2usize).min(pool.len() - start);
                let key = pool[start..start + len].join(" ");
                let question = QUESTION_TEMPLATES[rng.gen_range(0..QUESTION_TEMPLATES.len())].replace("{}", &key);
                let answer = self.answer_rule(&question, story);
                format!("{question} {answer}")
            }
            Some(Prompt::Answer { question, story }) => self.answer_rule(question, story),
            Some(Prompt::Question { answer }) => {
                format!("What about {}?", answer.trim().trim_end_matches(['.', '!', '?']))
            }
            Some(Prompt::Rationale { qa, story }) => {
                let keys = content_words(qa);
                let sentences = sentence_texts(story);
                sentences
                    .iter()
                    .max_by_key(|s| (overlap(&keys, s), std::cmp::Reverse(s.len())))
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| story.to_string())
            }
            Some(Prompt::History { history }) => history.to_string(),
            None => {
                let words = plain_words(input);
                let n = rng.gen_range(1..=4usize).min(words.len().max(1));
                (0..n).map(|_| words.get(rng.gen_range(0..words.len().max(1))).cloned().unwrap_or_default()).collect::<Vec<_>>().join(" ")
            }
        }
    }

    /// Answers `question` from `story`: the question's content words found in
    /// the best-overlapping sentence, in sentence order; otherwise a seeded
    /// two-word span of the story.
    fn answer_rule(&self, question: &str, story: &str) -> String {
        let keys = content_words(question);
        let mut best: Option<(usize, Vec<String>)> = None;
        for sentence in sentence_texts(story) {
            let words = plain_words(sentence);
            let mut found: Vec<String> = Vec::new();
            for w in &words {
                let lw = w.to_lowercase();
                if keys.iter().any(|k| k.to_lowercase() == lw) && !found.iter().any(|f| f.to_lowercase() == lw) {
                    found.push(w.clone());
                }
            }
            if !found.is_empty() && best.as_ref().is_none_or(|(n, _)| found.len() > *n) {
                best = Some((found.len(), found));
            }
        }
        if let Some((_, words)) = best {
            return format!("{}.", words.join(" "));
        }
        let words = plain_words(story);
        if words.is_empty() {
            return "Unknown.".to_string();
        }
        let mut rng = self.rng(&[b"answer", question.as_bytes(), story.as_bytes()]);
        let start = rng.gen_range(0..words.len());
        let end = (start + 2).min(words.len());
        format!("{}.", words[start..end].join(" "))
    }

    fn fallback_score(&self, input: &str, target: &str) -> TokenScores {
        let mut rng = self.rng(&[b"score", input.as_bytes(), target.as_bytes()]);
        let (lo, hi) = FALLBACK_LOSS_RANGE;
        let level = rng.gen_range(lo..hi);
        let n = target.split_whitespace().count().max(1);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mean_w = weights.iter().sum::<f64>() / n as f64;
        let logprobs = weights.iter().map(|w| -level * w / mean_w).collect();
        TokenScores::from_logprobs(logprobs).expect("finite synthetic log-probabilities")
    }
}

const QUESTION_TEMPLATES: [&str; 4] =
    ["What about {}?", "Who or what is {}?", "Why is {} mentioned?", "Where does {} appear?"];

const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "appear", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "had",
    "has", "have", "he", "her", "his", "how", "in", "is", "it", "its", "mentioned", "of", "on", "or", "she",
    "that", "the", "their", "there", "they", "this", "to", "was", "were", "what", "when", "where", "which", "who",
    "whom", "why", "with",
];

enum Prompt<'a> {
    Main { rationale: &'a str, story: &'a str },
    Answer { question: &'a str, story: &'a str },
    Question { answer: &'a str },
    Rationale { qa: &'a str, story: &'a str },
    History { history: &'a str },
}

fn parse_prompt(input: &str) -> Option<Prompt<'_>> {
    let slot = |prompt: &str| -> Option<(&str, &str)> {
        let marker = format!("{SEP} {prompt} ");
        let start = input.find(&marker)? + marker.len();
        let rest = &input[start..];
        let end_marker = format!(" {SEP}");
        let end = rest.find(&end_marker)?;
        let story = rest[end + end_marker.len()..].trim();
        Some((&rest[..end], story))
    };
    if let Some((rationale, story)) = slot(PROMPT_MAIN) {
        return Some(Prompt::Main { rationale, story });
    }
    if let Some((question, story)) = slot(PROMPT_ANSWER) {
        return Some(Prompt::Answer { question, story });
    }
    if let Some((answer, _)) = slot(PROMPT_QUESTION) {
        return Some(Prompt::Question { answer });
    }
    if let Some((qa, story)) = slot(PROMPT_RATIONALE) {
        return Some(Prompt::Rationale { qa, story });
    }
    let marker = format!("{SEP} {PROMPT_HISTORY} {SEP}");
    input.find(&marker).map(|pos| Prompt::History { history: input[..pos].trim() })
}

fn plain_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn content_words(text: &str) -> Vec<String> {
    plain_words(text)
        .into_iter()
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.to_lowercase().as_str()))
        .collect()
}

fn overlap(keys: &[String], sentence: &str) -> usize {
    let words: Vec<String> = plain_words(sentence).iter().map(|w| w.to_lowercase()).collect();
    keys.iter().filter(|k| words.contains(&k.to_lowercase())).count()
}

fn sentence_texts(story: &str) -> Vec<&str> {
    match split_sentences(story) {
        Ok(sentences) => {
            // map char offsets back to byte slices of `story`
            let byte_at: Vec<usize> = story.char_indices().map(|(b, _)| b).chain([story.len()]).collect();
            sentences.iter().map(|s| &story[byte_at[s.char_start]..byte_at[s.char_end]]).collect()
        }
        Err(_) => Vec::new(),
    }
}

impl Backend for MockBackend {
    fn generate(&self, input: &str, params: &DecodeParams) -> Result<Vec<String>, BackendError> {
        check_generate_request(input, params)?;
        let n = params.num_return;
        if let Some(rule) = self.lookup_generate(input, n) {
            let last = rule.candidates.last().cloned().unwrap_or_default();
            return Ok(rule.candidates.iter().cloned().chain(std::iter::repeat(last)).take(n).collect());
        }
        if !self.script.fallback {
            return Err(BackendError::ScriptMiss { kind: "generate" });
        }
        Ok((0..n).map(|i| self.fallback_candidate(input, params, i)).collect())
    }

    fn score(&self, input: &str, target: &str) -> Result<TokenScores, BackendError> {
        check_score_request(input, target)?;
        if let Some(rule) = self.lookup_score(input, target) {
            let logprobs = match (&rule.token_logprobs, rule.mean_nll) {
                (Some(v), _) => v.clone(),
                (None, Some(m)) => vec![-m],
                (None, None) => unreachable!("validated in MockBackend::new"),
            };
            return TokenScores::from_logprobs(logprobs).map_err(|e| BackendError::InvalidScore(e.to_string()));
        }
        if !self.script.fallback {
            return Err(BackendError::ScriptMiss { kind: "score" });
        }
        Ok(self.fallback_score(input, target))
    }
}
