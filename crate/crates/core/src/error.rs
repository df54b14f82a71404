use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{count} record(s) outside the domain: {preview}")]
    OutOfDomain { count: usize, preview: String },

    #[error("degenerate scaling: {0}")]
    DegenerateScaling(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("evaluation guard: {0}")]
    Guard(String),

    #[error("solver instability at step {step} (t = {time:.6}, max D = {max_d:.6e}): {reason}")]
    Instability {
        step: usize,
        time: f64,
        max_d: f64,
        reason: String,
    },

    #[error("non-finite {component} loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, component: String },

    #[error("empty support intersection: lo = {lo}, hi = {hi}")]
    EmptySupport { lo: f64, hi: f64 },

    #[error("symbolic regression failed: {0}")]
    Regression(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Instability { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Regression(_)
                | Error::Guard(_)
                | Error::EmptySupport { .. }
                | Error::DegenerateScaling(_)
        )
    }
}
