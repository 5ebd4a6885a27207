//! Voxel-level Siamese representation learning for multi-organ segmentation.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod sampler;
pub mod seed;
pub mod sweep;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Dims3, Tensor};
