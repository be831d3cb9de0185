//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error. Variants map one-to-one onto the failure classes the
/// public operations document: shape problems, unresolvable identifiers,
/// malformed inputs, numeric breakdown, and so on.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree. The message names the offending shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An entity, relation, tag, word, or concept id failed to resolve.
    #[error("unknown identifier: {0}")]
    Vocab(String),

    /// A precondition on the input data was violated.
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced NaN/Inf or otherwise lost numeric meaning.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Negative sampling could not produce a valid sample.
    #[error("sampling failed: {0}")]
    Sampling(String),

    /// A configuration value is missing, out of range, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked on a model in the wrong state.
    #[error("model state error: {0}")]
    State(String),

    /// A data file violated its format contract at a specific line.
    #[error("{file}:{line}: {reason}")]
    Data {
        file: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
