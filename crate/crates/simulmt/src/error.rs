//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to a kernel.
    #[error("dimension error in `{kernel}`: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    Dimension {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A problem instance is too large for an exhaustive routine.
    #[error("instance too large: {0}")]
    Size(String),

    /// Bad or empty input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or flag combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint or model file does not match the expected version/schema.
    #[error("version error: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
