use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::ClassId;

/// Errors produced by the detection toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: unknown class name `{name}`", path.display())]
    Vocabulary { path: PathBuf, name: String },
    #[error("no support crop available for class {0}")]
    Sampling(ClassId),
    #[error("not enough annotations for k={k} (available per class: {})", format_counts(available))]
    Capacity {
        k: usize,
        available: BTreeMap<ClassId, usize>,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_counts(counts: &BTreeMap<ClassId, usize>) -> String {
    counts
        .iter()
        .map(|(c, n)| format!("{c}={n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
