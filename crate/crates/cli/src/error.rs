use std::path::{Path, PathBuf};

use nuisance_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },

    #[error("{}: line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: line {line}: cannot take the log of non-positive value {value}", path.display())]
    NonPositiveUnderLog { path: PathBuf, line: usize, value: f64 },

    #[error("cannot write {}: {message}", path.display())]
    Output { path: PathBuf, message: String },

    #[error(transparent)]
    Numerical(#[from] CoreError),
}

impl CliError {
    /// 1 for numerical failures, 2 for anything the caller got wrong.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(e) => match e {
                CoreError::Io { .. } | CoreError::Parse { .. } => 2,
                _ => 1,
            },
            CliError::Output { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn input(path: &Path, message: impl ToString) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub(crate) fn output(path: &Path, message: impl ToString) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}
