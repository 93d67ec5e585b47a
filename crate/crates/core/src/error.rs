//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,

    #[error("non-positive IOI: {0} ms")]
    NonPositiveIoi(f64),

    #[error("rhythm bin {bin} out of range [0, {max}]")]
    BinOutOfRange { bin: usize, max: usize },

    #[error("start index {start} out of range for target of length {len}")]
    StartIndexOutOfRange { start: usize, len: usize },

    #[error("{name} distribution sums to {sum}, expected 1.0")]
    InvalidDistribution { name: String, sum: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("enumeration guard exceeded: more than {guard} paths")]
    EnumerationGuard { guard: u64 },

    #[error("query has zero probability under model")]
    ZeroProbabilityQuery,

    #[error("no scorable queries in training set")]
    NoScorableQueries,

    #[error("empty database")]
    EmptyDatabase,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
