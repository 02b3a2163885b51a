//! Error types, one enum per subsystem.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {width}x{height} is below the minimum side length")]
    TooSmall { width: u32, height: u32 },
    #[error("pixel buffer has {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Error)]
pub enum OpsError {
    #[error("codec failure: {0}")]
    EncodingFailure(String),
    #[error("operation would produce a degenerate {width}x{height} image")]
    DegenerateOutput { width: u32, height: u32 },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("label space of size {0} is too small for top-5 (need at least 6)")]
    LabelSpaceTooSmall(usize),
    #[error("batch item {index} failed: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("image preprocessing failed: {0}")]
    Preprocess(#[from] OpsError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training needs at least two labels, found {0}")]
    TooFewLabels(usize),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("image dimensions {found:?} differ from model input {expected:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("label {label} is outside the label space of size {num_labels}")]
    LabelOutOfRange { label: u32, num_labels: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("backend `{0}` does not expose input gradients")]
    GradientUnavailable(String),
    #[error("targeted attack target {target} equals the original top-1 label")]
    DegenerateTarget { target: u32 },
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ops(#[from] OpsError),
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("operation {index} failed: {source}")]
    Operation {
        index: usize,
        #[source]
        source: OpsError,
    },
    #[error("classification after operation {index} failed: {source}")]
    Classify {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("classification of the unmodified image failed: {0}")]
    Base(#[source] GatewayError),
    #[error("subset `{subset}` refers to operation position {position} but the trace has {len}")]
    SubsetOutOfRange { subset: String, position: usize, len: usize },
    #[error("operation subset is empty")]
    EmptySubset,
    #[error("unknown operation subset `{0}`")]
    UnknownSubset(String),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training rows contain only one class")]
    ClassMissing,
    #[error("pooled covariance is singular even after the shrinkage floor")]
    SingularCovariance,
    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("no training rows")]
    NoRows,
    #[error("detector file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("correction needs at least one operation in the subset")]
    EmptySubset,
    #[error("only {} distinct labels observed", .partial.labels.len())]
    FewerThanFiveLabels { partial: crate::correction::CorrectionResult },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("only {available} correctly classified images available, {needed} requested")]
    InsufficientCorrectImages { needed: usize, available: usize },
    #[error("cannot split {bases} base images at the requested ratios")]
    RatioInfeasible { bases: usize },
    #[error("import metadata missing: {0}")]
    MetadataMissing(String),
    #[error("manifest: {0}")]
    Format(String),
    #[error("content digest mismatch for {0}")]
    DigestMismatch(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error("{what} was produced by {found}, expected {expected}")]
    VersionMismatch { what: String, expected: String, found: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
