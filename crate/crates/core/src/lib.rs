//! Detection and correction of adversarial images from the stability of a
//! classifier's top-5 labels under a fixed suite of image processing
//! operations, plus a desk-scale adversarial data factory.

pub mod attacks;
pub mod binio;
pub mod correction;
pub mod dataset;
pub mod desk_model;
pub mod detectors;
pub mod error;
pub mod features;
pub mod gateway;
pub mod image;
pub mod ops;
pub mod pipeline;
pub mod synth;

pub use error::*;
pub use gateway::{top5_correct, Classifier, Differentiable, Top5};
pub use image::Image;
pub use ops::{canonical_suite, Operation, OperationSpec, OperationSuite};

/// Tool version embedded in every persisted artifact.
pub const TOOL_VERSION: &str = concat!("advdetect ", env!("CARGO_PKG_VERSION"));
