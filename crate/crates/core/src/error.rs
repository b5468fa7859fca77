//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Domain violation in an elementwise op (log of non-positive, division by zero).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Non-finite value produced where only finite values are legal.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated an API contract (non-scalar loss, flow index out of range).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file contents (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// A transform that must be invertible is not (singular mixing matrix).
    #[error("invertibility error: {0}")]
    Invertibility(String),

    /// Values left the numerically safe range (log-scale saturation).
    #[error("numeric stability error: {0}")]
    Stability(String),

    /// The independent checking oracle itself failed a precondition.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Input data violates its declared range or schema.
    #[error("data error: {0}")]
    Data(String),

    /// Training loss diverged; carries per-flow log-scale saturation stats.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
