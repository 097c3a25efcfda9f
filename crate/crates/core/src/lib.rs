//! Mixed-dense connection networks (MDCN) for single-image and multi-frame
//! super-resolution, with training, evaluation and a small tensor core.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Training and
//! inference run in `f32`; gradient checks run in `f64`.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod resize;
pub mod scalar;
pub mod shuffle;
pub mod tensor;
pub mod video;

pub use arch::{ModelParams, NetConfig};
pub use error::{Error, Result};
pub use image::ImageRGB;
pub use optim::{LossKind, TrainConfig};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = ModelParams<f32>;
pub type Model64 = ModelParams<f64>;
