use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A cell failed to parse or violated its field kind. Row numbers are
    /// 1-based data rows (excluding the header); the column is named.
    #[error("row {row}, column '{column}': {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    /// Schema sidecar problems or header/schema disagreement.
    #[error("schema error: {0}")]
    Schema(String),

    /// Structural dataset violations (duplicate ids, all-missing rows, ...).
    #[error("invalid dataset: {0}")]
    Dataset(String),

    /// Dimension or configuration mismatches between components.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The sampler hit a non-finite log-posterior, which signals corrupted
    /// parameters rather than bad data.
    #[error("non-finite log-posterior encountered during sampling (record '{record}')")]
    NonFiniteLogPosterior { record: String },

    /// The EM objective became NaN. The dump carries the offending state as
    /// JSON so the failure can be reproduced.
    #[error("EM objective diverged to NaN at iteration {iteration}; state dump:\n{dump}")]
    Divergence { iteration: usize, dump: String },

    /// Too few complete pairs for a correlation or regression.
    #[error("need at least {needed} complete pairs, found {found}")]
    InsufficientPairs { needed: usize, found: usize },

    /// A series with zero variance cannot be correlated or regressed on.
    #[error("zero variance in {0}")]
    ZeroVariance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
