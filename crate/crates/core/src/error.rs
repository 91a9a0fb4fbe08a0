use std::path::Path;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed evidence {id}: {detail}")]
    MalformedEvidence { id: String, detail: String },
    #[error("no embedding for instance {instance_id:?} node {node_index}")]
    MissingEmbedding { instance_id: String, node_index: usize },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("invalid instance {id}: {detail}")]
    InvalidInstance { id: String, detail: String },
    #[error("{path}: unsupported format version {found} (expected {expected}); regenerate the file with this release")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
