//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("grid data length {actual} does not match dimensions ({expected} expected)")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("probability value {value} outside [0, 1]")]
    ValueOutOfRange { value: f64 },
    #[error("mask values must be 0 or 1")]
    NonBinaryMask,
}

#[derive(Debug, Error)]
pub enum SharpenError {
    #[error("logit domain error: p = {p} is outside (0, 1)")]
    LogitDomain { p: f64 },
    #[error("invalid sharpening config: {reason}")]
    InvalidConfig { reason: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image_size {size} too small to place a bone (minimum 16)")]
    ImageTooSmall { size: usize },
    #[error("invalid dataset spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("gt_mask_of called on an image-level positive sample {sample_id}; use the pseudo-GT path")]
    MaskOfPositive { sample_id: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture id {id:?}")]
    UnknownArchitecture { id: String },
    #[error("parameter count {actual} does not match architecture {id} ({expected} expected)")]
    ParameterCountMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("input {height}x{width} not divisible by 2^{scales}")]
    ShapeError {
        height: usize,
        width: usize,
        scales: usize,
    },
    #[error("non-finite loss ({context})")]
    NumericalError { context: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint file: {reason}")]
    MalformedCheckpoint { reason: String },
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: prediction {pred_h}x{pred_w}, target {target_h}x{target_w}")]
    ShapeMismatch {
        pred_h: usize,
        pred_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("loss over an empty batch is undefined")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("auroc undefined: all {n} labels belong to a single class")]
    SingleClass { n: usize },
    #[error("auroc inputs disagree in length ({scores} scores, {labels} labels)")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("froc undefined: no ground-truth boxes in any record")]
    NoBoxes,
    #[error("froc requires at least one record")]
    NoRecords,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("pretraining requires at least one region-labeled sample")]
    EmptyRegionSet,
    #[error("pretraining set must contain only region-labeled and negative samples, found {kind} ({sample_id})")]
    ForbiddenKind { kind: String, sample_id: String },
    #[error("architecture mismatch: teacher {teacher}, student {student}")]
    ArchitectureMismatch { teacher: String, student: String },
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run artifact io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed run state: {reason}")]
    MalformedState { reason: String },
}
