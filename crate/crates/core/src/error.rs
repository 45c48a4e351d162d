use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("need at least 4 distinct event times to form quartile bins, got {distinct}")]
    DegenerateBins { distinct: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("c-index undefined: no permissible pairs")]
    UndefinedCindex,

    #[error("no events observed; Cox model cannot be fitted")]
    NoEvents,

    #[error("information matrix is singular at covariate `{covariate}`")]
    Singular { covariate: String },

    #[error("paired inputs do not describe the same patients: {0}")]
    PatientMismatch(String),

    #[error("unknown stage token `{token}`; valid tokens: {valid}")]
    UnknownStage { token: String, valid: String },

    #[error("field `{0}` is missing in every record of the cohort")]
    MissingEverywhere(&'static str),

    #[error("record could not be scored: {0}")]
    Unscorable(String),

    #[error("no native spacing at or finer than {max_mpp} mpp is available (have {available:?})")]
    NoValidSpacing { max_mpp: f64, available: Vec<f64> },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
