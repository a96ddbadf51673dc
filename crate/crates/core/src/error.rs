//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input column {0:?} not found in header")]
    MissingColumn(String),

    #[error("line {line}: {reason}")]
    BadRow { line: u64, reason: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("record {id}: {reason}")]
    BadRecord { id: String, reason: String },

    #[error("empty input")]
    EmptyInput,

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("quantile level {0} outside [0, 1]")]
    BadQuantileLevel(f64),

    #[error("non-finite value in input")]
    NonFinite,

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("scale is zero or negative; significance undefined")]
    DegenerateScale,

    #[error("cell scale must be non-negative, got {0}")]
    NegativeSigma(f64),

    #[error("degenerate bin edges on {axis} axis: too few distinct values")]
    DegenerateEdges { axis: String },

    #[error("variable {0} is constant across the pooled sample")]
    ConstantVariable(String),

    #[error("no strata contain both groups")]
    ZeroOverlap,

    #[error("group {0:?} is empty")]
    EmptyGroup(String),

    #[error("fit ranges differ between the two inputs")]
    RangeMismatch,

    #[error("curves were built with different binning")]
    BinningMismatch,

    #[error("bootstrap replicates were not retained; rerun with keep_replicates")]
    ReplicatesMissing,

    #[error("no records with both an inferred and an independent age")]
    NoTruthPairs,

    #[error("no valid cells")]
    NoValidCells,

    #[error("parse error in {path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
