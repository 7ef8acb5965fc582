//! Canonical unit-cube embeddings for dense head correspondence.
//!
//! A learnable latent grid over the cube is queried trilinearly at per-pixel
//! canonical coordinates predicted by a small embedder. The crate also holds
//! the synthetic data generator used for supervision and the downstream
//! tools built on canonical maps: dense warping, point and region queries,
//! multi-view triangulation and rigid pose fitting.

mod binio;
pub mod embedder;
pub mod error;
pub mod grid;
pub mod image;
pub mod losses;
pub mod matcher;
pub mod optim;
pub mod pose;
pub mod scalar;
pub mod stereo;
pub mod synth;
mod text;
pub mod train;
pub mod uvw;

pub use embedder::{Architecture, EmbedMode, EmbedderParams};
pub use error::{Error, Result};
pub use grid::{CanonPoint, LatentGrid};
pub use losses::{FeatureBatch, LandmarkAnchors, LossWeights, SegmentationHead};
pub use pose::RigidPose;
pub use scalar::Real;
pub use train::{Model, ModelConfig, TrainConfig};
pub use uvw::UvwMap;

pub type LatentGridF64 = LatentGrid<f64>;
pub type LatentGridF32 = LatentGrid<f32>;
pub type CanonPointF64 = CanonPoint<f64>;
pub type FeatureBatchF64 = FeatureBatch<f64>;
pub type SegmentationHeadF64 = SegmentationHead<f64>;
pub type EmbedderParamsF64 = EmbedderParams<f64>;
pub type EmbedderParamsF32 = EmbedderParams<f32>;
pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
