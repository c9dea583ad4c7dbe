//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("failed to parse {path}: {source}")]
    AnnotationParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("annotation references unknown image_id {image_id}")]
    UnknownImageId { image_id: u32 },

    #[error("annotation ({x}, {y}) lies outside image {image_id} ({width}x{height})")]
    AnnotationOutOfBounds {
        image_id: u32,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("duplicate image id {0}")]
    DuplicateImageId(u32),

    #[error("image {id} is {width}x{height}; images must be at least 56x56")]
    ImageTooSmall { id: u32, width: usize, height: usize },

    #[error("image {path}: declared size {declared_w}x{declared_h} does not match file ({actual_w}x{actual_h})")]
    ImageSizeMismatch {
        path: PathBuf,
        declared_w: usize,
        declared_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("patch center ({x}, {y}) outside image bounds ({width}x{height})")]
    CenterOutsideImage { x: f64, y: f64, width: usize, height: usize },

    #[error("dataset has no positive annotations")]
    NoPositives,

    #[error("could not place a negative patch center after {attempts} attempts")]
    NegativePlacement { attempts: usize },

    #[error("could not place object {object} in image {image} after {attempts} attempts")]
    ObjectPlacement { object: usize, image: usize, attempts: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint schema version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
