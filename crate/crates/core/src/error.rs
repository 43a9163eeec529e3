use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("negative time {0} passed to the semigroup")]
    NegativeTime(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point is not in the control set (distance {distance:e})")]
    NotInSet { distance: f64 },

    #[error("direction is not in the adjacent cone (residual {residual:e})")]
    NotTangent { residual: f64 },

    #[error("non-finite value in {stage} at path {path}, step {step}")]
    NonFinite {
        stage: &'static str,
        path: usize,
        step: usize,
    },

    #[error("coefficient family `{family}` does not provide {what}")]
    Capability { family: String, what: &'static str },

    #[error("control set `{family}` has no maximizer search: {reason}")]
    NoMaximizer { family: &'static str, reason: &'static str },

    #[error("Riccati scheme lost positive semidefiniteness at step {step} (min eigenvalue {min_eigenvalue:e})")]
    Riccati { step: usize, min_eigenvalue: f64 },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
