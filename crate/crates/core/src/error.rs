//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A contract violation on an operation's inputs (shape, level, index
    /// misalignment, dimension mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A loss term evaluated to a non-finite value; training must abort.
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },

    /// A container, checkpoint or config file failed to parse.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset directory unusable (empty or no decodable images).
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
