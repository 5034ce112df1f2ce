use std::fmt;

/// Errors raised by the numerical and simulation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("singular matrix in {0}")]
    SingularMatrix(&'static str),
    #[error("non-finite output from {0}")]
    NonFiniteOutput(&'static str),
    #[error("pursuer gain matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularGain { condition: f64 },
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("control {value} outside bounds [{lo}, {hi}] in dimension {dim}")]
    ControlOutOfBounds {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("every candidate control sequence produced an invalid cost")]
    AllCandidatesInvalid,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    /// The innermost error, looking through step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
