use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A child configuration or search space violates its own constraints.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes disagree with what an operation expects.
    #[error("dimension error at {node}: {message}")]
    Dimension { node: String, message: String },

    /// An operation was called in the wrong state, e.g. backward without forward.
    #[error("state error: {0}")]
    State(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric fault in {location}: {message}")]
    Numeric { location: String, message: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    /// No candidate satisfies the requested budget.
    #[error("budget of {budget} MAdds is infeasible; smallest candidate needs {smallest} MAdds")]
    BudgetInfeasible { budget: u64, smallest: u64 },

    #[error("parse error in {path}{}: {message}", location.map(|(l, c)| format!(" at line {l}, column {c}")).unwrap_or_default())]
    Parse {
        path: String,
        location: Option<(usize, usize)>,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary data (dataset records, checkpoints).
    #[error("corrupt data in {} at byte offset {offset}: {message}", path.display())]
    Corrupt {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn dim(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dimension {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
