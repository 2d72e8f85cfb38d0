use std::path::PathBuf;

use crate::{ClassId, RecordId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed feature file: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {actual}{}", context_suffix(.context))]
    Dimension {
        expected: usize,
        actual: usize,
        context: Option<String>,
    },

    #[error("non-finite value in record {id}")]
    Data { id: RecordId },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("class {class} has too few records: {detail}")]
    InsufficientData { class: ClassId, detail: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("subspace fit failed: {0}")]
    Fit(String),

    #[error("empty model: {0}")]
    EmptyModel(String),

    #[error("inconsistent engine state: {0}")]
    State(String),

    #[error("mapper fit failed: {0}")]
    MapperFit(String),

    #[error("oracle has no label for record {0}")]
    Oracle(RecordId),

    #[error("record {0} was already labeled")]
    Requery(RecordId),

    #[error("invalid class id: {0}")]
    ClassId(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        Error::Dimension {
            expected,
            actual,
            context: None,
        }
    }
}
