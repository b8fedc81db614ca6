use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or geometry passed at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// A point outside the stored slab was read under open boundaries.
    #[error("range error: {0}")]
    Range(String),

    /// A walk cone or prefactor cone leaves the window.
    #[error("geometry error: {0} (enlarge the window or the horizon margin)")]
    Geometry(String),

    /// Exact enumeration requested on a slab that is too large.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A measure could not be normalised.
    #[error("degenerate measure: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
}
