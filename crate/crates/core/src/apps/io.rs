//! JSONL reading and writing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::AppError;

/// Parses one JSON value per nonblank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>, AppError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::Parse { path: origin.to_string(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AppError> {
    let text = fs::read_to_string(path).map_err(|source| AppError::Io { path: path.display().to_string(), source })?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize to JSON"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), AppError> {
    fs::write(path, to_jsonl(items)).map_err(|source| AppError::Io { path: path.display().to_string(), source })
}
