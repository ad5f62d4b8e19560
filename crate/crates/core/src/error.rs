use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {col}: {message}")]
    BadValue {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("row {row}, column {col}: non-finite value")]
    NonFinite { row: usize, col: usize },

    #[error("duplicate item_id `{0}`")]
    DuplicateId(String),

    #[error("malformed EMAT file: {0}")]
    Emat(String),

    #[error("join produced no items")]
    EmptyJoin,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample too small: need at least {needed}, got {got}")]
    SampleTooSmall { needed: usize, got: usize },

    #[error("singular system; use a positive ridge lambda")]
    Singular,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("non-finite covariance")]
    NonFiniteCovariance,

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no identity has at least {min_per_group} items in both groups")]
    NoQualifyingIdentities { min_per_group: usize },

    #[error("template `{0}` has no items")]
    EmptyTemplate(String),

    #[error("template `{template}` mixes subjects `{first}` and `{second}`")]
    MixedTemplate {
        template: String,
        first: String,
        second: String,
    },

    #[error("zero-norm pooled feature in template `{0}`")]
    ZeroNorm(String),

    #[error("pair set `{set}` has no {missing} pairs")]
    DegeneratePairs {
        set: &'static str,
        missing: &'static str,
    },

    #[error("all input rows are identical")]
    DegenerateInput,

    #[error("non-finite embedding coordinate at iteration {iteration}")]
    NumericalBlowup { iteration: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
