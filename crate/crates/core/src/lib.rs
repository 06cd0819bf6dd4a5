//! Differentiable kernels, a small reverse-mode tape, and the cooperative
//! explicit/implicit warping pipeline for keypoint-driven portrait animation.

pub mod bundle;
pub mod cgf;
pub mod data;
pub mod dofw;
pub mod encoding;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rac;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
