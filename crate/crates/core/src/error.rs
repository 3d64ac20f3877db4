use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong extent along one axis.
    #[error("{op}: axis `{axis}` expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("model file integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported model file version {found} (this build reads version {supported})")]
    Version { found: String, supported: u32 },

    #[error("model file holds variant `{found}`, expected `{expected}`")]
    VariantMismatch { expected: String, found: String },

    #[error("weight archive error: {0}")]
    Archive(String),

    #[error("dataset ingestion failed for {root}: {problems:?}")]
    Ingestion {
        root: PathBuf,
        problems: Vec<String>,
    },

    #[error("missing datasets {missing:?}; download them and place them under {root}")]
    MissingDatasets { root: PathBuf, missing: Vec<String> },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
