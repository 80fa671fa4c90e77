use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected \"SPTN\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("{what}: {n} is not divisible by {by}")]
    NotDivisible { what: &'static str, n: usize, by: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Fails with [`Error::NotDivisible`] unless `by` divides `n`.
pub(crate) fn check_divisible(what: &'static str, n: usize, by: usize) -> Result<()> {
    if by == 0 || !n.is_multiple_of(by) {
        return Err(Error::NotDivisible { what, n, by });
    }
    Ok(())
}
