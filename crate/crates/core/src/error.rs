use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("placement out of bounds: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("detector provider failed ({context}): {message}")]
    Provider { context: String, message: String },

    #[error("knowledge base: {0}")]
    Knowledge(String),

    #[error("depth: {0}")]
    Depth(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True when the failure was caused by the caller's inputs rather than a
    /// bug or environment fault.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Provider { .. })
    }
}
