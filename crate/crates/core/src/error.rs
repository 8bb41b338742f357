use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("{solver} solver: matrix is singular or not positive definite (pivot {pivot} at row {row})")]
    Singular {
        solver: &'static str,
        row: usize,
        pivot: f64,
    },

    #[error("spearman correlation undefined: input is constant")]
    ConstantInput,

    #[error("training sample {index} is never {missing} in any subset")]
    Coverage { index: usize, missing: &'static str },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported file version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metadata JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent data rather than
    /// bad arguments. The CLI maps these to exit code 2.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Parameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
