use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("no feasible configuration: {0}")]
    Infeasible(String),

    #[error("training aborted at step {step}: {reason} (last good checkpoint: {checkpoint})")]
    TrainingAborted { step: usize, reason: String, checkpoint: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Shape { .. } => "shape",
            Self::Autograd(_) => "autograd",
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::NonFinite(_) => "non_finite",
            Self::Invariant(_) => "invariant",
            Self::Infeasible(_) => "infeasible",
            Self::TrainingAborted { .. } => "training_aborted",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}
