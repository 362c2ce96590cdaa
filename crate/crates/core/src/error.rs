use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A trace or layout record could not be parsed or failed validation.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A structural invariant of the trace model was violated.
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("group too small: {found} rollout(s), need at least {required}")]
    GroupTooSmall { found: usize, required: usize },

    #[error("instance too large for exhaustive search: min(m, n) = {size} > {limit}")]
    InstanceTooLarge { size: usize, limit: usize },

    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("transport plan did not converge: marginal violation {violation:e} after {iterations} iterations")]
    NonConvergence { violation: f64, iterations: usize },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Io(_) => 2,
            Error::NonConvergence { .. } => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
