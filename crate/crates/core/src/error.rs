//! Error types shared across the crate.

/// Crate-wide error type.
///
/// Contract violations (bad shapes, empty sets, missing gradients) are kept
/// distinct from data errors (bad input files) so callers can map them to
/// exit codes and tests can assert on the exact failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("embedding id {id} out of range for table of {vocab} rows")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
