use std::path::PathBuf;

use crate::tame::TraceRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("backward requires a scalar output, got shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate statistics: sigma {sigma} is not above the floor {floor}")]
    DegenerateStats { sigma: f64, floor: f64 },

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        value: f64,
        /// Model parameters from the last iteration whose loss was finite.
        last_good: Box<crate::flow::FlowModel>,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("stopping criterion not met after {iterations} iterations")]
    MaxIterationsExceeded {
        iterations: usize,
        trace: Vec<TraceRow>,
    },

    #[error("unsupported checkpoint schema version `{0}`")]
    SchemaVersion(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),

    #[error("forget and remember sets overlap ({0} shared points)")]
    Overlap(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied parameters rather than
    /// runtime or data failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidCount(_))
    }
}
