use thiserror::Error;

/// Errors produced by the model, the samplers and the data layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite after jitter: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite {what} at ({row}, {col})")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("non-finite log-likelihood at the current point of an elliptical slice update")]
    NonFiniteStart,

    #[error("elliptical slice bracket collapsed below {0:e} rad without acceptance")]
    SliceCollapsed(f64),

    #[error("operation `{op}` is not supported for the {kind} likelihood")]
    Unsupported { kind: String, op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty input file")]
    CsvEmpty,

    #[error("line {line}: expected {expected} fields, found {found}")]
    CsvRagged {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}, column `{column}`: cannot parse `{cell}` as a number")]
    CsvParse {
        line: usize,
        column: String,
        cell: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty chain: {0}")]
    EmptyChain(String),

    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), inner: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
