use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operand had the wrong extent along a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("run `{run_id}` has {len} time steps, shorter than the window length {window}")]
    InputTooShort {
        run_id: String,
        len: usize,
        window: usize,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: u64,
        detail: String,
    },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("model file does not match its declared spec: {0}")]
    SpecMismatch(String),

    #[error("unsupported {kind} format version {found} (this build reads version {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("calibration: class {class} has {count} windows, at least {required} are required")]
    Calibration {
        class: String,
        count: usize,
        required: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: &'static str },

    #[error("experiment failed at repetition {repetition} after {completed} completed runs: {source}")]
    Experiment {
        repetition: usize,
        completed: usize,
        /// JSON of the repetitions that finished before the failure.
        partial: Option<String>,
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
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
