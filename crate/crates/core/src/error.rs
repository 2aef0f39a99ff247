use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Every violated configuration invariant, one entry per field path.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{module}: invalid input: {message}")]
    Invalid { module: &'static str, message: String },

    #[error("{module}: numerical failure: {message}")]
    Numerical { module: &'static str, message: String },

    #[error("{module}: precondition violated: {message}")]
    Precondition { module: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid { module, message: message.into() }
    }

    pub(crate) fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical { module, message: message.into() }
    }

    pub(crate) fn precondition(module: &'static str, message: impl Into<String>) -> Self {
        Error::Precondition { module, message: message.into() }
    }

    /// Process exit status used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid { .. } | Error::Json(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Precondition { .. } => 4,
            Error::Io(_) => 1,
        }
    }
}
