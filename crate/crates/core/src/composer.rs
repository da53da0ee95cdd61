//! Prompt composition for the five multitask formats, parsing of main-task
//! output, and multitask training-record preparation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AuxTask, ContextState, QAPair, Story, TypesError};

/// Literal field separator used in every prompt.
pub const SEP: &str = "<sep>";

pub const PROMPT_ANSWER: &str = "answer this:";
pub const PROMPT_QUESTION: &str = "question it:";
pub const PROMPT_MAIN: &str = "pose pair:";
pub const PROMPT_RATIONALE: &str = "find rationale:";
pub const PROMPT_HISTORY: &str = "generate history";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("payload does not match task {task}")]
    PayloadMismatch { task: TaskKind },
    #[error("malformed candidate: {0:?}")]
    MalformedCandidate(String),
    #[error("story {story}: rationale span {start}..{end} exceeds {len} characters")]
    SpanOutOfRange { story: String, start: usize, end: usize, len: usize },
    #[error("story {story}, turn {turn}: {reason}")]
    InvalidTurn { story: String, turn: usize, reason: String },
    #[error(transparent)]
    Types(#[from] TypesError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    A,
    Q,
    Main,
    R,
    H,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [TaskKind::A, TaskKind::Q, TaskKind::Main, TaskKind::R, TaskKind::H];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::A => "a",
            TaskKind::Q => "q",
            TaskKind::Main => "main",
            TaskKind::R => "r",
            TaskKind::H => "h",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<AuxTask> for TaskKind {
    fn from(t: AuxTask) -> Self {
        match t {
            AuxTask::A => TaskKind::A,
            AuxTask::Q => TaskKind::Q,
            AuxTask::R => TaskKind::R,
            AuxTask::H => TaskKind::H,
        }
    }
}

/// Task-specific slot of a prompt.
#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    /// Task a: the question to answer.
    Question(&'a str),
    /// Task q: the answer to restore a question from.
    Answer(&'a str),
    /// Task main: index of the rationale sentence.
    Rationale(usize),
    /// Task r: the pair whose rationale is sought.
    QuestionAnswer(&'a str, &'a str),
    /// Task h: the current turn, appended to the context history.
    Turn(&'a QAPair),
}

/// Renders Q-A pairs as `"Q1? A1 Q2? A2 ..."`.
pub fn render_history(pairs: &[QAPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{} {}", p.question, p.answer))
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_fields(fields: &[&str]) -> String {
    fields.iter().filter(|f| !f.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

/// Builds the model input for `task` at the turn following `context`.
pub fn compose_input(task: TaskKind, context: &ContextState, payload: Payload<'_>) -> Result<String, ComposeError> {
    compose_input_parts(task, context.history(), context.story(), payload)
}

/// [`compose_input`] over an explicit history and story. The history's
/// rationale indices are not consulted, so it may come from another story.
pub fn compose_input_parts(
    task: TaskKind,
    history: &[QAPair],
    story_ref: &Story,
    payload: Payload<'_>,
) -> Result<String, ComposeError> {
    let history = render_history(history);
    let story = story_ref.text();
    let out = match (task, payload) {
        (TaskKind::A, Payload::Question(q)) => join_fields(&[&history, SEP, PROMPT_ANSWER, q, SEP, story]),
        (TaskKind::Q, Payload::Answer(a)) => join_fields(&[&history, SEP, PROMPT_QUESTION, a, SEP, story]),
        (TaskKind::Main, Payload::Rationale(idx)) => {
            let rationale = &story_ref.sentence(idx)?.text;
            join_fields(&[&history, SEP, PROMPT_MAIN, rationale, SEP, story])
        }
        (TaskKind::R, Payload::QuestionAnswer(q, a)) => {
            join_fields(&[&history, SEP, PROMPT_RATIONALE, q, a, SEP, story])
        }
        (TaskKind::H, Payload::Turn(pair)) => {
            let current = format!("{} {}", pair.question, pair.answer);
            join_fields(&[&history, &current, SEP, PROMPT_HISTORY, SEP])
        }
        (task, _) => return Err(ComposeError::PayloadMismatch { task }),
    };
    Ok(out)
}

/// Builds the training/scoring target of `task` for `turn`, the turn that
/// follows `context`.
pub fn compose_target(task: TaskKind, context: &ContextState, turn: &QAPair) -> Result<String, ComposeError> {
    let out = match task {
        TaskKind::A => turn.answer.clone(),
        TaskKind::Q => turn.question.clone(),
        TaskKind::Main => format!("{} {}", turn.question, turn.answer),
        TaskKind::R => context.story().sentence(turn.rationale_index)?.text.clone(),
        TaskKind::H => {
            context.story().sentence(turn.rationale_index)?;
            let mut covered = context.covered().clone();
            covered.insert(turn.rationale_index);
            context.story().union_text(&covered)
        }
    };
    Ok(out)
}

/// Splits main-task output at its first `?` into question and answer.
pub fn parse_main_output(text: &str) -> Result<(String, String), ComposeError> {
    let Some(pos) = text.find('?') else {
        return Err(ComposeError::MalformedCandidate(text.to_string()));
    };
    let question = format!("{}?", text[..pos].trim());
    let answer = text[pos + 1..].trim();
    if question == "?" || answer.is_empty() {
        return Err(ComposeError::MalformedCandidate(text.to_string()));
    }
    Ok((question, answer.to_string()))
}

/// One story of an annotated conversational-QA corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedStory {
    pub id: String,
    pub story: String,
    #[serde(default)]
    pub turns: Vec<AnnotatedTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTurn {
    pub question: String,
    pub answer: String,
    /// Character offsets of the annotated rationale, end-exclusive.
    pub rationale_start: usize,
    pub rationale_end: usize,
    #[serde(default)]
    pub unknown: bool,
}

/// Ensures a question ends with exactly one `?`.
pub fn normalize_question(q: &str) -> String {
    let trimmed = q.trim().trim_end_matches(|c: char| c == '?' || c.is_whitespace());
    format!("{trimmed}?")
}

impl AnnotatedStory {
    /// Segments the story and resolves every answerable turn to a
    /// [`QAPair`] whose rationale is the sentence containing the start of the
    /// annotated span. Unknown-answer turns are dropped.
    pub fn resolve(&self) -> Result<(Arc<Story>, Vec<QAPair>), ComposeError> {
        let story = Story::new(self.id.clone(), self.story.clone())?;
        let len = story.char_len();
        let mut pairs = Vec::new();
        for (i, t) in self.turns.iter().enumerate() {
            if t.rationale_end > len || t.rationale_start > t.rationale_end {
                return Err(ComposeError::SpanOutOfRange {
                    story: self.id.clone(),
                    start: t.rationale_start,
                    end: t.rationale_end,
                    len,
                });
            }
            if t.unknown {
                continue;
            }
            let invalid = |reason: String| ComposeError::InvalidTurn { story: self.id.clone(), turn: i + 1, reason };
            let rationale = story
                .sentence_at(t.rationale_start)
                .ok_or_else(|| invalid("rationale span lies after the last sentence".into()))?;
            let pair = QAPair::new(pairs.len() + 1, normalize_question(&t.question), t.answer.clone(), rationale)
                .map_err(|e| invalid(e.to_string()))?;
            pairs.push(pair);
        }
        Ok((Arc::new(story), pairs))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: TaskKind,
    pub input: String,
    pub target: String,
    pub story_id: String,
    pub turn: usize,
}

/// Emits five records (one per task) for every answerable turn, then
/// shuffles all records with a stream seeded by `seed`.
pub fn build_training_records(corpus: &[AnnotatedStory], seed: u64) -> Result<Vec<TrainingRecord>, ComposeError> {
    let mut records = Vec::new();
    for entry in corpus {
        let (story, pairs) = entry.resolve()?;
        let mut context = ContextState::new(story);
        for pair in &pairs {
            for task in TaskKind::ALL {
                let payload = match task {
                    TaskKind::A => Payload::Question(&pair.question),
                    TaskKind::Q => Payload::Answer(&pair.answer),
                    TaskKind::Main => Payload::Rationale(pair.rationale_index),
                    TaskKind::R => Payload::QuestionAnswer(&pair.question, &pair.answer),
                    TaskKind::H => Payload::Turn(pair),
                };
                records.push(TrainingRecord {
                    task,
                    input: compose_input(task, &context, payload)?,
                    target: compose_target(task, &context, pair)?,
                    story_id: entry.id.clone(),
                    turn: pair.turn,
                });
            }
            context = context.append(pair.clone(), None)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STC1: &str = "Once upon a time in Greece, there lived a young man called Narcissus.";
    const STC2: &str = "He lived in a small village on the sea and was famous in the land because he was quite handsome.";

    fn story() -> Arc<Story> {
        Arc::new(Story::new("narcissus", format!("{STC1} {STC2}")).unwrap())
    }

    fn pair(q: &str, a: &str, r: usize) -> QAPair {
        QAPair::new(1, q, a, r).unwrap()
    }

    #[test]
    fn render_history_cases() {
        assert_eq!(render_history(&[]), "");
        assert_eq!(render_history(&[pair("Who is her daughter?", "Mela.", 0)]), "Who is her daughter? Mela.");
        assert_eq!(
            render_history(&[pair("Q1?", "A1", 0), pair("Q2?", "A2", 0)]),
            "Q1? A1 Q2? A2"
        );
    }

    #[test]
    fn empty_history_has_no_leading_space() {
        let ctx = ContextState::new(story());
        let input = compose_input(TaskKind::A, &ctx, Payload::Question("Who?")).unwrap();
        assert_eq!(input, format!("<sep> answer this: Who? <sep> {STC1} {STC2}"));
    }

    #[test]
    fn main_input_carries_rationale_text() {
        let ctx = ContextState::new(story());
        let input = compose_input(TaskKind::Main, &ctx, Payload::Rationale(0)).unwrap();
        assert!(input.starts_with(&format!("<sep> pose pair: {STC1} <sep> ")));
    }

    #[test]
    fn payload_mismatch() {
        let ctx = ContextState::new(story());
        assert_eq!(
            compose_input(TaskKind::A, &ctx, Payload::Answer("x")),
            Err(ComposeError::PayloadMismatch { task: TaskKind::A })
        );
        assert!(compose_input(TaskKind::Main, &ctx, Payload::Rationale(9)).is_err());
    }

    #[test]
    fn main_target_and_parse() {
        let ctx = ContextState::new(story());
        let p = pair("Where did he live?", "A small village on the sea.", 1);
        let target = compose_target(TaskKind::Main, &ctx, &p).unwrap();
        assert_eq!(target, "Where did he live? A small village on the sea.");
        let (q, a) = parse_main_output(&target).unwrap();
        assert_eq!((q.as_str(), a.as_str()), ("Where did he live?", "A small village on the sea."));
    }

    #[test]
    fn parse_cases() {
        assert_eq!(
            parse_main_output("Was he famous in the land? Yes.").unwrap(),
            ("Was he famous in the land?".to_string(), "Yes.".to_string())
        );
        assert_eq!(
            parse_main_output("Why? Because he was quite handsome.").unwrap(),
            ("Why?".to_string(), "Because he was quite handsome.".to_string())
        );
        assert!(matches!(parse_main_output("no question mark here"), Err(ComposeError::MalformedCandidate(_))));
        assert!(matches!(parse_main_output("Who?   "), Err(ComposeError::MalformedCandidate(_))));
        assert!(matches!(parse_main_output("? answer"), Err(ComposeError::MalformedCandidate(_))));
    }

    #[test]
    fn history_target_deduplicates() {
        let s = story();
        let ctx = ContextState::from_history(
            s.clone(),
            &[pair("Q1?", "A1", 0), pair("Q2?", "A2", 1)],
        )
        .unwrap();
        let t = compose_target(TaskKind::H, &ctx, &pair("Q3?", "A3", 1)).unwrap();
        assert_eq!(t, format!("{STC1} {STC2}"));
        let first = compose_target(TaskKind::H, &ContextState::new(s), &pair("Q1?", "A1", 0)).unwrap();
        assert_eq!(first, STC1);
    }

    #[test]
    fn question_normalization() {
        assert_eq!(normalize_question("what color was it"), "what color was it?");
        assert_eq!(normalize_question("Who?? "), "Who?");
    }

    fn corpus() -> Vec<AnnotatedStory> {
        let text = format!("{STC1} {STC2}");
        let s2 = STC1.chars().count() + 1;
        vec![AnnotatedStory {
            id: "narcissus".into(),
            story: text,
            turns: vec![
                AnnotatedTurn { question: "What was the name of the young man?".into(), answer: "Narcissus.".into(), rationale_start: 40, rationale_end: 68, unknown: false },
                AnnotatedTurn { question: "Where did he live?".into(), answer: "A small village on the sea.".into(), rationale_start: s2 + 3, rationale_end: s2 + 30, unknown: false },
                AnnotatedTurn { question: "Did he have a dog?".into(), answer: "unknown".into(), rationale_start: 0, rationale_end: 0, unknown: true },
                // span crosses the boundary: first containing sentence wins
                AnnotatedTurn { question: "Was he famous in the land?".into(), answer: "Yes.".into(), rationale_start: 60, rationale_end: s2 + 10, unknown: false },
            ],
        }]
    }

    #[test]
    fn resolve_expands_spans_and_drops_unknown() {
        let (_, pairs) = corpus()[0].resolve().unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.iter().map(|p| p.rationale_index).collect::<Vec<_>>(), [0, 1, 0]);
        assert_eq!(pairs.iter().map(|p| p.turn).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn records_five_per_turn_and_seeded() {
        let recs = build_training_records(&corpus(), 7).unwrap();
        assert_eq!(recs.len(), 15);
        for task in TaskKind::ALL {
            assert_eq!(recs.iter().filter(|r| r.task == task).count(), 3);
        }
        let again = build_training_records(&corpus(), 7).unwrap();
        assert_eq!(recs, again);
        let other = build_training_records(&corpus(), 8).unwrap();
        assert_ne!(recs, other);
    }

    #[test]
    fn span_out_of_range() {
        let mut c = corpus();
        c[0].turns[0].rationale_end = 10_000;
        assert!(matches!(build_training_records(&c, 1), Err(ComposeError::SpanOutOfRange { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn main_round_trip(q in "[A-Za-z ,']{1,40}", a in "[A-Za-z0-9 .,!?']{1,40}") {
                prop_assume!(!q.trim().is_empty() && !a.trim().is_empty());
                let p = QAPair::new(1, format!("{}?", q.trim()), a.clone(), 0).unwrap();
                let ctx = ContextState::new(story());
                let target = compose_target(TaskKind::Main, &ctx, &p).unwrap();
                let (pq, pa) = parse_main_output(&target).unwrap();
                prop_assert_eq!(pq, p.question);
                prop_assert_eq!(pa, p.answer);
            }

            #[test]
            fn history_target_sorted_unique(rats in prop::collection::vec(0usize..2, 0..6), last in 0usize..2) {
                let s = story();
                let hist: Vec<QAPair> = rats.iter().map(|&r| pair("Q?", "A.", r)).collect();
                let ctx = ContextState::from_history(s.clone(), &hist).unwrap();
                let t = compose_target(TaskKind::H, &ctx, &pair("Q?", "A.", last)).unwrap();
                let mut covered: Vec<usize> = rats.clone();
                covered.push(last);
                covered.sort();
                covered.dedup();
                let expected = covered.iter().map(|&i| s.sentences()[i].text.as_str()).collect::<Vec<_>>().join(" ");
                prop_assert_eq!(t, expected);
            }
        }
    }
}
