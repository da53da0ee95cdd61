//! Consecutive question generation.
//!
//! Generates an ordered, connected series of question-answer pairs over a
//! passage. One multitask model is used through five prompt formats
//! ([`composer`]); candidates from the main task are self-reranked with the
//! losses of the four auxiliary tasks ([`reranker`]); the rationale of each
//! next turn is sampled from the information left in the current sentence
//! ([`sampler`]); and a sentence-level beam search keeps the flows with the
//! lowest cumulative loss ([`search`]). The model sits behind [`backend`].
//! [`apps`] holds the data-augmentation export, zero-shot document NLI, and
//! token F1.

pub mod apps;
pub mod backend;
pub mod composer;
pub mod reranker;
pub mod sampler;
pub mod search;
pub mod types;

pub use backend::{Backend, BackendError, GeneratorHandle, MockBackend, MockScript, RemoteClient, RemoteConfig};
pub use composer::{AnnotatedStory, AnnotatedTurn, TaskKind, TrainingRecord};
pub use reranker::{Aggregation, RerankConfig};
pub use sampler::KpStrategy;
pub use search::{SearchConfig, SearchMode, SearchResult};
pub use types::{AuxTask, ContextState, DecodeParams, FlowHypothesis, QAPair, ScoredCandidate, Story, TokenScores};
