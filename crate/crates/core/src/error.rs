use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of a function (non-finite values, points
    /// outside the image of the transform, invalid hyperparameters).
    #[error("domain error: {0}")]
    Domain(String),

    /// A sample whose dispersion is too small to estimate anything from.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("running statistics not initialized: {0}")]
    Uninitialized(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by numerically degenerate data rather than
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::DegenerateSample(_) | Error::Divergence { .. })
    }
}
