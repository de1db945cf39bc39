use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: smoothness nu = {nu} (need nu > 2 or nu = inf)")]
    InvalidKernel { nu: f64 },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("forward pass diverged at step {step} (state norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 for divergence or failed checks, 2 for bad
    /// configuration, bad input files or degenerate data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::CheckFailed(_) => 1,
            _ => 2,
        }
    }
}
