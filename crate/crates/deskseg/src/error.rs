use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain index {domain} out of range (num_domains = {num_domains})")]
    DomainOutOfRange { domain: usize, num_domains: usize },

    #[error("domain {domain} has no running statistics and no other domain has been updated")]
    NoDomainStats { domain: usize },

    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("non-finite loss at iteration {iteration} (batch: {batch})")]
    NonFiniteLoss { iteration: usize, batch: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
