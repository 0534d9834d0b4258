//! Minimal hand-differentiated network layers.

pub mod checkpoint;
pub mod layers;
pub mod params;
mod scalar;

pub use layers::{Conv3d, GroupNorm, Linear, Tensor};
pub use params::{Adam, Gradients, Param, ParamId, ParamStore};
pub use scalar::{matmul, Scalar};
