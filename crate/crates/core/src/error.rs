use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("second moment {second_moment} does not exceed squared mean of {mean}")]
    NonPositiveVariance { mean: f64, second_moment: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite message at layer {layer}, unit {unit}, sample {sample}")]
    NonFinite {
        layer: usize,
        unit: usize,
        sample: usize,
    },

    #[error("non-finite parameter evidence at layer {layer}, weight ({unit}, {input})")]
    NonFiniteEvidence {
        layer: usize,
        unit: usize,
        input: usize,
    },

    #[error("{path}: row {row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("record: {0}")]
    Record(String),

    #[error("no client returned a summary this round")]
    NoClients,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
