//! Multi-kernel dilated attention U-Net for retinal vessel segmentation,
//! built from first principles: tensor kernels, reverse-mode autodiff,
//! the composite blocks, preprocessing, metrics and file formats.

pub mod autograd;
pub mod blocks;
pub mod dataio;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod network;
pub mod params;
pub mod preprocess;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape4, Tensor4};
