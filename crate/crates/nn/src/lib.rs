//! From-scratch neural stage: scatter operation, 3D ConvNeXt U-Net with
//! hand-derived gradients, AdamW and the training loop.

pub mod checkpoint;
pub mod convnext;
pub mod error;
pub mod layers;
pub mod munet;
pub mod optim;
pub mod params;
pub mod real;
pub mod scatter;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{NnError, Result};
pub use munet::{MuNet, MuNetConfig};
pub use real::Real;
pub use tensor::Tensor4;
