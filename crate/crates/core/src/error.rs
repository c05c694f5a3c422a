use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension: {0}")]
    Dimension(String),

    #[error("config: {0}")]
    Config(String),

    #[error("contract: {0}")]
    Contract(String),

    #[error("state: {0}")]
    State(String),

    #[error("format: {0}")]
    Format(String),

    #[error("task id {id} out of range for a bank of {tasks} tasks")]
    TaskId { id: usize, tasks: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty evaluation: confusion matrix has no samples")]
    EmptyEvaluation,

    #[error("split: {0}")]
    Split(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable category token used as the prefix of single-line CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::TaskId { .. } => "task",
            Error::Label { .. } => "label",
            Error::EmptyEvaluation => "evaluation",
            Error::Split(_) => "split",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
