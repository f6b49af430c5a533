use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("landmark {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },

    #[error("frame has zero extent ({width}x{height})")]
    ZeroFrame { width: f64, height: f64 },

    #[error("cannot l2-normalize a zero vector")]
    ZeroVector,

    #[error("expected {expected} {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown target `{id}`; registered targets: {}", .available.join(", "))]
    UnknownTarget { id: String, available: Vec<String> },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid identity spec `{id}`: {reason}")]
    IdentitySpec { id: String, reason: String },

    #[error("{path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn expect_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
