use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A matrix shape, printed as `rows×cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            left: Shape(left.0, left.1),
            right: Shape(right.0, right.1),
        }
    }

    /// Short machine-readable category, used by the CLI in its failure line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Sampling(_) => "sampling",
            Error::Training(_) => "training",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Verification(_) => "verification",
            Error::Io(_) => "io",
        }
    }
}
