//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: product is {expected} but data length is {actual}")]
    InvalidShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("channel mismatch in {layer}: expected {expected} input channels, got {actual}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate output size on axis {axis} of {layer}: input {input} with kernel {kernel}, stride {stride}, padding {padding}")]
    DegenerateSpatial {
        layer: String,
        axis: usize,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("zero-norm weight slice {channel} in {layer}")]
    ZeroNormChannel { layer: String, channel: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid duration {value} at position {index}: durations must be positive")]
    InvalidDuration { index: usize, value: i64 },

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
