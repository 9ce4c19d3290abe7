use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("function returned a non-finite value during finite differencing (coordinate {coordinate:?})")]
    NonFiniteEvaluation { coordinate: Option<usize> },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("negative variance {0:.3e} in delta-method interval")]
    NegativeVariance(f64),

    #[error("bias posterior needs at least {needed} groups of at least {min_size} samples, got {found}")]
    InsufficientGroups {
        needed: usize,
        min_size: usize,
        found: usize,
    },

    #[error("training loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize },

    #[error("network with {hidden_layers} hidden layers reached accuracy {accuracy:.4}, below the required {required:.2}")]
    AccuracyNotReached {
        hidden_layers: usize,
        accuracy: f64,
        required: f64,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    /// Stable short name used when tallying failed replications.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteEvaluation { .. } => "NonFiniteEvaluation",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SingularMatrix(_) => "SingularMatrix",
            Error::InvalidProbability(_) => "InvalidProbability",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::InvalidParams(_) => "InvalidParams",
            Error::InvalidData(_) => "InvalidData",
            Error::NegativeVariance(_) => "NegativeVariance",
            Error::InsufficientGroups { .. } => "InsufficientGroups",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::AccuracyNotReached { .. } => "AccuracyNotReached",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
