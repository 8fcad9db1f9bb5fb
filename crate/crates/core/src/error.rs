use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not match what an operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{op}: shape {shape:?} does not match data length {len}")]
    ShapeData {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("value {value} outside domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("variable belongs to tape {var_tape}, not tape {tape}")]
    ForeignVar { tape: u64, var_tape: u64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error(
        "certification infeasible: {reason} (sigma={sigma}, epsilon={epsilon}, n={n}); \
         increase the number of samples to at least {min_samples}"
    )]
    Infeasible {
        reason: String,
        sigma: f64,
        epsilon: f64,
        n: usize,
        min_samples: usize,
    },

    #[error("correlation undefined: {0}")]
    Correlation(&'static str),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
