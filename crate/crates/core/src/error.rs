use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {norm:e} is too small to normalize")]
    ZeroNormQuaternion { norm: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },

    #[error("loss combination `{combination}` needs the relative pose head, which this model lacks")]
    MissingHead { combination: String },

    #[error("malformed pose file {path}: {reason}")]
    MalformedPoseFile { path: PathBuf, reason: String },

    #[error("rotation block in {path} is not orthogonal (|RᵀR - I| = {deviation:e})")]
    NonOrthogonalRotation { path: PathBuf, deviation: f64 },

    #[error("malformed line {line} in {path}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("sequence `{sequence}` has {len} frame(s); at least 2 are required")]
    SequenceTooShort { sequence: String, len: usize },

    #[error("cannot place aliasing partners {min_distance} m apart: {reason}")]
    InfeasibleAliasing { min_distance: f64, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    DivergedLoss { epoch: usize, reason: String },

    #[error("test split is empty")]
    EmptyTestSplit,

    #[error("unknown frame id `{0}`")]
    UnknownFrame(String),

    #[error("no prediction for frame `{0}`")]
    MissingPrediction(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
