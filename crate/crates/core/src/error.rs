use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The CLI maps each variant onto a process exit code through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate stratification: {0}")]
    DegenerateStrata(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with a pipeline stage name, keeping the exit code.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Data(m) => Error::Data(format!("{stage}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{stage}: {m}")),
            Error::DegenerateStrata(m) => Error::DegenerateStrata(format!("{stage}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{stage}: {m}")),
            Error::Config(m) => Error::Config(format!("{stage}: {m}")),
            Error::Csv(e) => Error::Data(format!("{stage}: csv: {e}")),
            Error::Json(e) => Error::Config(format!("{stage}: json: {e}")),
            Error::Cell { row, column, message } => Error::Cell { row, column, message: format!("{message} ({stage})") },
            io @ Error::Io { .. } => io,
        }
    }

    /// Exit codes: 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Csv(_) | Error::Cell { .. } | Error::Data(_) => 3,
            Error::DegenerateStrata(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
