use thiserror::Error;

use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model_dim {model_dim} is not divisible by num_heads {num_heads}")]
    HeadDivisibility { model_dim: usize, num_heads: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("correlation factor is ill-conditioned: Cholesky diagonal {min_diag:e} below 1e-12")]
    IllConditioned { min_diag: f64 },

    #[error("empirical marginals need at least {needed} reference values per dimension, got {got}")]
    EmptyReference { needed: usize, got: usize },

    #[error("zero or negative scale in component {index}")]
    ZeroScale { index: usize },

    #[error("no normal log-densities and no running mean available for mu_norm")]
    MuNormUnavailable,

    #[error("non-finite {what} value at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("anomaly fraction {fraction} is unattainable: {reason}")]
    UnattainableAnomalyFraction { fraction: f64, reason: String },

    #[error("empty row range")]
    EmptyRowRange,

    #[error("unknown case preset {0} (expected 1, 2 or 3)")]
    UnknownCase(u8),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("window length {window} exceeds series length {length}")]
    WindowTooLong { window: usize, length: usize },

    #[error("batch contains no frames")]
    EmptyBatch,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupted array `{name}`: {reason}")]
    CorruptArray { name: String, reason: String },

    #[error("threshold undefined: labels contain a single class")]
    ThresholdUndefined,

    #[error("operation requires a copula dependency model")]
    UnsupportedFamily,

    #[error("unknown configuration key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("configuration key `{key}` expects {expected}")]
    TypeMismatch { key: String, expected: &'static str },

    #[error("output path {0} already exists (use --force to overwrite)")]
    OutputExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
