use std::fmt::Display;

pub use cram_diff::Error as DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite gradient in parameter group `{group}` at step {step}")]
    NonFinite { group: String, step: u64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Display) -> Self {
        Error::Diff(DiffError::Config(msg.to_string()))
    }

    pub fn data(msg: impl Display) -> Self {
        Error::Diff(DiffError::Data(msg.to_string()))
    }

    pub fn usage(msg: impl Display) -> Self {
        Error::Diff(DiffError::Usage(msg.to_string()))
    }

    pub fn format(offset: u64, msg: impl Display) -> Self {
        Error::Diff(DiffError::Format {
            offset,
            msg: msg.to_string(),
        })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Diff(DiffError::Io(_) | DiffError::Format { .. }))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Diff(DiffError::Io(e))
    }
}
