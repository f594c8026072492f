use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed joint manifest: {0}")]
    MalformedManifest(String),

    #[error("{task} score {value} for joint {joint} outside 0..={max}")]
    ScoreOutOfRange {
        joint: usize,
        task: &'static str,
        value: i64,
        max: u32,
    },

    #[error("no content: {0}")]
    NoContent(String),

    #[error("joint {joint} center ({x:.2}, {y:.2}) lies outside the crop box")]
    CenterOutsideBox { joint: usize, x: f64, y: f64 },

    #[error("joint {joint} center left the canvas after augmentation")]
    CenterLost { joint: usize },

    #[error("joint {joint} is missing its {task} score")]
    MissingScore { joint: usize, task: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every loss term is excluded; nothing to supervise")]
    NoSupervision,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("too few patients: {patients} ids cannot fill {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },

    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("metric over an empty set")]
    EmptySet,

    #[error("no prediction for joint {joint} of image {image}")]
    MissingPrediction { image: String, joint: usize },

    #[error("joint {joint} footprint leaves the {h}x{w} canvas")]
    GeometryOverflow { joint: usize, h: usize, w: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, manifests,
    /// annotations) rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedManifest(_)
                | Error::InvalidConfig(_)
                | Error::InvalidAnnotation(_)
                | Error::ScoreOutOfRange { .. }
                | Error::MissingScore { .. }
                | Error::TooFewPatients { .. }
        )
    }
}
