//! Error type shared across the engine.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward pass produced a NaN or Inf; `node` is the tape node that
    /// would have held the result.
    #[error("numeric error at node {node}: {detail}")]
    Numeric { node: usize, detail: String },

    /// An iterative routine failed to converge.
    #[error("did not converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    /// Invalid configuration (bad layer set, mode/shape mismatch, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (out-of-range token, empty corpus, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An operation was called in the wrong order (e.g. backward before
    /// forward).
    #[error("state error: {0}")]
    State(String),

    /// Checkpoint bytes do not start with the expected magic/version.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// Checkpoint payload ends before the declared contents.
    #[error("corrupt checkpoint at byte {offset}: {detail}")]
    Corruption { offset: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
