use std::path::PathBuf;

/// Errors raised by the deconvolution toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {got}, expected {expected}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("kernel of side {kernel} does not fit a {height}x{width} image")]
    KernelTooLarge { kernel: usize, height: usize, width: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Returns a shape error unless `got == expected`.
pub(crate) fn ensure_dim(op: &'static str, dim: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape { op, dim, got, expected })
    }
}
