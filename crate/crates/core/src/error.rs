use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for `{name}`: expected {expected}, got {actual:?}")]
    Shape {
        name: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("input size {height}x{width} is not divisible by {divisor}")]
    InputSize {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("invalid stage index {0}; expected 1, 2 or 3")]
    Stage(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent ablation flags: {0}")]
    Flags(String),

    #[error("{0}")]
    Weights(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor inventory mismatch: {0}")]
    Inventory(String),

    #[error("corrupt archive {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported archive version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(PathBuf),

    #[error("images without masks: {0:?}")]
    OrphanImages(Vec<String>),

    #[error("unmatched stems: {0:?}")]
    UnmatchedStems(Vec<String>),

    #[error("ground truth `{0}` is not binary")]
    NonBinary(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("step {step} out of range 0..{total}")]
    StepRange { step: usize, total: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(name: impl Into<String>, expected: impl Into<String>, actual: &[usize]) -> Self {
        Error::Shape {
            name: name.into(),
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
