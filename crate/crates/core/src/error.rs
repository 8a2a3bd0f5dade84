use std::path::PathBuf;

use thiserror::Error;

use crate::netspec::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error at {}: {message}", location(*line, *column, field))]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        field: String,
        message: String,
    },

    #[error("invalid fused-net spec: {}", join_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("backward called before forward: {0}")]
    BackwardBeforeForward(String),

    #[error("label {label} at batch index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("malformed data at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn location(line: Option<usize>, column: Option<usize>, field: &str) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!("line {l}, column {c} ({field})"),
        (Some(l), None) => format!("line {l} ({field})"),
        _ => field.to_string(),
    }
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
