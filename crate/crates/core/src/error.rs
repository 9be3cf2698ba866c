use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    #[error("input size {height}x{width} is not divisible by {multiple} (pad or crop first)")]
    InputSize {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("tensor data length {len} does not match dims {dims:?}")]
    TensorLength { dims: Vec<usize>, len: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("missing weight array `{0}`")]
    MissingWeight(String),

    #[error("weight blob truncated: array `{0}` extends past the end of weights.bin")]
    TruncatedWeights(String),

    #[error("weight `{name}` has dims {found:?}, topology expects {expected:?}")]
    WeightDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("relevance target pixel set is empty")]
    EmptyTarget,

    #[error("k-means failed: {0}")]
    Clustering(String),

    #[error("synthetic placement infeasible: {0}")]
    Placement(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}

/// `fs::read` that names the file when it fails.
pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
