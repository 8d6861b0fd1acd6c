use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes of the engine.
///
/// The CLI maps these onto exit codes via [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations (last change {last_change:e}): {what}")]
    Convergence {
        what: String,
        iterations: usize,
        last_change: f64,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("states are not gauge equivalent: dominant eigenvalue {0} is not close to 1")]
    NotEquivalent(String),

    #[error("degenerate dominant eigenvalue: {0}")]
    Degeneracy(String),

    #[error("renormalized gate is unsafe to recycle: fidelity {fidelity:.3e} below {threshold:.3e}")]
    RecycleUnsafe { fidelity: f64, threshold: f64 },

    #[error("recycling became unstable: {0}")]
    Instability(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Coarse error classes, one per process exit code.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Convergence,
    Numeric,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::Convergence { .. } | Error::Instability(_) | Error::RecycleUnsafe { .. } => {
                ErrorClass::Convergence
            }
            Error::Numeric(_)
            | Error::Degeneracy(_)
            | Error::NotEquivalent(_)
            | Error::ContractViolation(_)
            | Error::Dimension(_) => ErrorClass::Numeric,
            Error::Resource(_) | Error::Io(_) | Error::Serde(_) => ErrorClass::Other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Convergence => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Other => 1,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
