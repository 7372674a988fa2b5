use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("singular system: smallest pivot {pivot:.3e} at index {index}")]
    Singular { index: usize, pivot: f64 },

    #[error("matrix is not positive definite: pivot {pivot:.3e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("weak or rank-deficient instrument: min singular value {min_sv:.3e} <= {threshold:.1e}")]
    WeakInstrument { min_sv: f64, threshold: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("every run failed: {0}")]
    AllRunsFailed(String),

    #[error("{failed} of {total} seeds failed: {detail}")]
    TooManyFailures { failed: usize, total: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("mixing construction failed: {0}")]
    Seed(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than usage.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::WeakInstrument { .. }
                | Error::Divergence { .. }
                | Error::AllRunsFailed(_)
                | Error::TooManyFailures { .. }
                | Error::NonFinite(_)
                | Error::Seed(_)
        )
    }
}
