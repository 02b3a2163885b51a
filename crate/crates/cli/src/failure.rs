//! Error classes and their exit codes.

use std::io;

use advdetect_core::{
    AttackError, DatasetError, DetectorError, FeatureError, GatewayError, ModelError, OpsError, PipelineError,
};

pub const IO: u8 = 1;
pub const MISSING: u8 = 2;
pub const VALIDATION: u8 = 3;
pub const BACKEND: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn missing(message: impl Into<String>) -> Self {
        Self { code: MISSING, message: message.into() }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: VALIDATION, message: message.into() }
    }

    fn backend(e: impl ToString) -> Self {
        Self { code: BACKEND, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        let code = if e.kind() == io::ErrorKind::NotFound { MISSING } else { IO };
        Self { code, message: e.to_string() }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Self::backend(e)
    }
}

impl From<OpsError> for Failure {
    fn from(e: OpsError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => io.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Gateway(g) => g.into(),
            AttackError::Model(m) => m.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<FeatureError> for Failure {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Classify { .. } | FeatureError::Base(_) => Self::backend(e),
            FeatureError::Io(io) => io.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::Io(io) => io.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Gateway(g) => g.into(),
            DatasetError::Io(io) => io.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Feature(f) => f.into(),
            PipelineError::Detector(d) => d.into(),
            PipelineError::Gateway(g) => g.into(),
            PipelineError::Io(io) => io.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}
