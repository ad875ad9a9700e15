use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("clean labels are not available on this dataset")]
    CleanLabelsUnavailable,
    #[error("training diverged at epoch {epoch}, step {step}: non-finite {term}")]
    Diverged { epoch: usize, step: usize, term: String },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
