//! Arbitrary-scale single-image super-resolution with a pixel branch and a
//! texture branch, plus the training, evaluation and tiling machinery around it.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod image;
pub mod lfi;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod stf;
pub mod texture;
pub mod tiling;

pub use error::{CheckpointError, Error, Result};
pub use geometry::{CoordGrid, FeatureMap, QuerySet};
pub use image::ImageTensor;
pub use model::{IsteModel, ModelConfig, Variant};

/// Tensor device and element type, re-exported for downstream crates.
pub use candle_core::{DType, Device};
