use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration that cannot be honored (bad ratios, wrong channel count, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation invoked in the wrong order, e.g. backward without a recorded forward pass.
    #[error("state error: {0}")]
    State(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// Feature extraction failed for a specific record during the matching protocol.
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Failures while decoding or matching a weight container.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}, expected \"IRKW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor `{name}`: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from container")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in container")]
    UnexpectedTensor(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// Failures while loading a dataset manifest.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest JSON: {0}")]
    Malformed(#[source] serde_json::Error),
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: referenced file {path} does not exist")]
    MissingFile { id: String, path: PathBuf },
}
