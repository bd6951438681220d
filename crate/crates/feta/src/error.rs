use thiserror::Error;

/// Unified error type for the whole toolkit.
///
/// The CLI maps variants onto exit codes: `Verification` → 1,
/// `NumericalAbort` → 3, everything else → 2.
#[derive(Debug, Error)]
pub enum FetaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("verification failure: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FetaError>;

impl FetaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FetaError::Shape { op, detail: detail.into() }
    }
}
