use std::path::PathBuf;

use chrono::{DateTime, Utc};
use thiserror::Error;

/// Broad classes of failure. The CLI maps each to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("underdetermined problem: {rows} rows for {cols} coefficients")]
    Underdetermined { rows: usize, cols: usize },

    #[error("design matrix has no linearly independent column")]
    Rank,

    #[error("simplex did not converge within {0} pivots")]
    IterationCap(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("hourly grid is not contiguous: gap after {after}, next timestamp {next}")]
    Gap {
        after: DateTime<Utc>,
        next: DateTime<Utc>,
    },

    #[error("malformed input ({} cells): {}", .0.len(), summarize_cells(.0))]
    Malformed(Vec<CellError>),

    #[error("insufficient data: {required} hours required, {available} available")]
    InsufficientData { required: usize, available: usize },

    #[error("out-of-order submission: expected {expected}, got {got}")]
    OutOfOrder {
        expected: DateTime<Utc>,
        got: DateTime<Utc>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One unparsable cell of an input table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellError {
    pub line: usize,
    pub column: String,
    pub text: String,
}

fn summarize_cells(cells: &[CellError]) -> String {
    let shown: Vec<String> = cells
        .iter()
        .take(5)
        .map(|c| format!("line {} column {:?} = {:?}", c.line, c.column, c.text))
        .collect();
    let mut s = shown.join("; ");
    if cells.len() > 5 {
        s.push_str("; ...");
    }
    s
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Csv(_) => ErrorKind::Io,
            Error::IterationCap(_)
            | Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::Rank
            | Error::Underdetermined { .. } => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
