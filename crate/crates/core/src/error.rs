use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("invalid mask schedule: n={n}, alpha={alpha} ({reason})")]
    InvalidSchedule { n: usize, alpha: f64, reason: String },

    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("mask budget k={k} exceeds region of {region} bins")]
    BudgetExceedsRegion { k: usize, region: usize },

    #[error("{op} needs at least {min} views, got {got}")]
    Arity {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("missing gradient for adaptable parameter `{0}`")]
    MissingGradient(String),

    #[error("archive format: {0}")]
    Archive(String),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("source training stopped at {accuracy:.4} accuracy (threshold {threshold}); loss curve {curve:?}")]
    TrainingFailure {
        accuracy: f64,
        threshold: f64,
        curve: Vec<f64>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
