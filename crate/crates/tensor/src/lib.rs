//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors,
//! limited to the operators image-to-image convolutional networks need:
//! strided and transposed convolutions with zero or reflection padding,
//! instance normalization, pointwise activations, reductions and 2x2 pooling.

mod conv;
mod element;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use conv::{ConvTranspose2dSpec, Conv2dSpec, PadMode, Padding};
pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{CustomOp, Gradients, Graph, Var, ACOS_CLAMP_EPS};
pub use params::{BoundParams, ParamId, ParamSet, INIT_STD};
pub use tensor::Tensor;

/// Epsilon added to the variance in instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
