use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown {kind} '{name}'; valid names: {valid}")]
    NotFound {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("evaluation produced a non-finite value in {0}")]
    Evaluation(String),

    #[error("least-squares fit is singular ({0}); try a positive ridge")]
    SingularFit(String),

    #[error("tube blow-up at t = {time}: box diameter {diameter} exceeds cap {cap}")]
    TubeBlowUp { time: f64, diameter: f64, cap: f64 },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("point outside grid domain: {0}")]
    OutOfDomain(String),

    #[error("scenario validation failed: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
