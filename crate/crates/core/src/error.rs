use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarioError {
    /// A caller broke an operation's precondition (shape, length, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value produced during training or inference.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed on-disk data; `line` is 1-based when known.
    #[error("{}: {message}", location(path, *line))]
    Data {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn location(path: &std::path::Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{}", path.display(), l),
        None => path.display().to_string(),
    }
}

impl MarioError {
    pub fn data(path: impl Into<PathBuf>, line: Option<usize>, message: impl Into<String>) -> Self {
        MarioError::Data {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MarioError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MarioError>;
