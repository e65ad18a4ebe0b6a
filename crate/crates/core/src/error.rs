use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // scene validation
    #[error("category {0} is not in the taxonomy")]
    UnknownCategory(i64),
    #[error("object {index} has center ({cx}, {cy}) outside [0,1]^2")]
    CenterOutOfRange { index: usize, cx: f64, cy: f64 },
    #[error("object {index} has size {size}, allowed range is 1..={max}")]
    SizeOutOfSet { index: usize, size: i64, max: u32 },
    #[error("scene has no objects")]
    EmptyScene,
    #[error("scene has {count} objects, at most {max} are allowed")]
    TooManyObjects { count: usize, max: usize },
    #[error("canvas {h}x{w} is not a positive multiple of {factor}")]
    CanvasNotDivisible { h: usize, w: usize, factor: usize },
    #[error("perturbation range must be non-negative, got {0}")]
    NegativeRange(f64),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),

    // layout generation
    #[error("a stuff object was passed to the instance branch (category {0})")]
    StuffObjectPassed(usize),
    #[error("a thing object was passed to the stuff branch (category {0})")]
    ThingObjectPassed(usize),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("masked softmax needs at least one active channel")]
    EmptyActiveSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("category index {index} out of range for a table with {rows} rows")]
    CategoryOutOfRange { index: usize, rows: usize },
    #[error("latent has dimension {got}, expected {expected}")]
    LatentDimMismatch { got: usize, expected: usize },

    // data
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("annotation references category {0} which is not in the taxonomy")]
    CategoryMismatch(i64),
    #[error("bad dataset config: {0}")]
    BadConfig(String),

    // training / checkpoints
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint taxonomy hash {checkpoint} does not match {expected}")]
    CheckpointMismatch { checkpoint: String, expected: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn name(&self) -> &'static str {
        match self {
            Error::UnknownCategory(_) => "UnknownCategory",
            Error::CenterOutOfRange { .. } => "CenterOutOfRange",
            Error::SizeOutOfSet { .. } => "SizeOutOfSet",
            Error::EmptyScene => "EmptyScene",
            Error::TooManyObjects { .. } => "TooManyObjects",
            Error::CanvasNotDivisible { .. } => "CanvasNotDivisible",
            Error::NegativeRange(_) => "NegativeRange",
            Error::InvalidTaxonomy(_) => "InvalidTaxonomy",
            Error::StuffObjectPassed(_) => "StuffObjectPassed",
            Error::ThingObjectPassed(_) => "ThingObjectPassed",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::EmptyActiveSet => "EmptyActiveSet",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CategoryOutOfRange { .. } => "CategoryOutOfRange",
            Error::LatentDimMismatch { .. } => "LatentDimMismatch",
            Error::MissingFile(_) => "MissingFile",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::CategoryMismatch(_) => "CategoryMismatch",
            Error::BadConfig(_) => "BadConfig",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::CheckpointMismatch { .. } => "CheckpointMismatch",
            Error::BadCheckpoint(_) => "BadCheckpoint",
            Error::IoFailure { .. } => "IOFailure",
            Error::Json(_) => "Json",
            Error::Image(_) => "Image",
            Error::Tensor(_) => "Tensor",
        }
    }

    /// True for errors caused by an invalid scene description.
    pub fn is_invalid_scene(&self) -> bool {
        matches!(
            self,
            Error::UnknownCategory(_)
                | Error::CenterOutOfRange { .. }
                | Error::SizeOutOfSet { .. }
                | Error::EmptyScene
                | Error::TooManyObjects { .. }
                | Error::CanvasNotDivisible { .. }
                | Error::NegativeRange(_)
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }
}
