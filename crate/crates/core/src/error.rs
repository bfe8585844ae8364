//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error in {op}: {lhs} vs {rhs}")]
    Dim {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Non-finite values where finite ones are required (training divergence).
    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, truncated arrays, version skew).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
}

impl Error {
    pub fn dim(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }

    pub fn contract(op: &'static str, msg: impl ToString) -> Self {
        Error::Contract {
            op,
            msg: msg.to_string(),
        }
    }

    pub fn format(path: impl ToString, msg: impl ToString) -> Self {
        Error::Format {
            path: path.to_string(),
            msg: msg.to_string(),
        }
    }
}
