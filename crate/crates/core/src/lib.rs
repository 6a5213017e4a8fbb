//! Semi-supervised nuclei instance segmentation at desk scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the training pipeline.

pub mod crc;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used for training and inference.
pub type Real = f32;
pub type Model = model::Model<Real>;
pub type Model64 = model::Model<f64>;
pub type FeatureMap = tensor::FeatureMap<Real>;
pub type Grid = tensor::Grid<Real>;
pub type EmbeddingGrid = model::EmbeddingGrid<Real>;
