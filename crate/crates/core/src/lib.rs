//! Salient object detection with global context-aware progressive
//! aggregation: tensors, a small reverse-mode autograd, the encoder, the
//! decoder blocks, training, data handling and evaluation metrics.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod par;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
