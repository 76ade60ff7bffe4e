use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected DQTC")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("header/data overlap: {0}")]
    Overlap(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dtype mismatch for `{name}`: {left} vs {right}")]
    DTypeMismatch {
        name: String,
        left: &'static str,
        right: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate deltas: no positive weight update")]
    DegenerateDeltas,

    #[error("missing calibration for module `{0}`")]
    MissingCalibration(String),

    #[error("missing importance for module `{0}`")]
    MissingImportance(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("code {code} out of range for {bits}-bit packing")]
    CodeOutOfRange { code: u8, bits: u8 },

    #[error("packed length mismatch: expected {expected} bytes, got {actual}")]
    PackedLength { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
