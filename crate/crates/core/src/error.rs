use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {field}: {message}")]
    Annotation {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("missing page images for annotations: {}", .pages.join(", "))]
    MissingImages { pages: Vec<String> },

    #[error("no annotation files found in {0}")]
    NoAnnotations(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
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

    #[error("text adapter {0:?} is not registered; set the semantic encoder kind to builtin_recurrent to use the built-in encoder")]
    AdapterUnavailable(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (this build reads version {expected}); re-export the checkpoint with a matching release")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("shape mismatch for tensor {name}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("tensor {0} is missing from the checkpoint")]
    MissingTensor(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
