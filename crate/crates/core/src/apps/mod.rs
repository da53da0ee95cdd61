//! Applications built on the engine and the configuration they share.

pub mod augment;
pub mod config;
pub mod docnli;
pub mod f1;
pub mod io;

use thiserror::Error;

use crate::backend::BackendError;
use crate::composer::ComposeError;
use crate::search::SearchError;
use crate::types::TypesError;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("all {0} passages failed")]
    AllPassagesFailed(usize),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Types(#[from] TypesError),
}
