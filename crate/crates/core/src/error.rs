use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum XdiffError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("operation requires the {expected} variant")]
    Variant { expected: &'static str },

    #[error("inference threshold is not set; calibrate it first")]
    ThresholdUnset,

    #[error("threshold estimation failed: no batch selected a positive activation")]
    ThresholdEstimation,

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("undefined scaling: {0}")]
    UndefinedScaling(String),

    #[error("invalid patch: {0}")]
    Patch(String),

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = XdiffError> = std::result::Result<T, E>;

impl XdiffError {
    /// Process exit code for the CLI: 2 usage/config, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            XdiffError::Config(_) | XdiffError::Variant { .. } | XdiffError::Patch(_) => 2,
            XdiffError::Io(_) | XdiffError::Csv(_) | XdiffError::Format(_) | XdiffError::Truncated { .. } => 4,
            _ => 3,
        }
    }
}
