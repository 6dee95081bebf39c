//! Minimal CPU autodiff engine: NCHW tensors, a reverse-mode tape, the
//! handful of ops the registration and segmentation networks need, and
//! Adam. Single-threaded and bit-deterministic.

mod graph;
mod params;
mod tensor;
pub mod unet;

pub use graph::{softmax_channels, warp_forward, Gradients, Graph, Var};
pub(crate) use graph::grad_reg_value;
pub use params::{Adam, ParamStore};
pub use tensor::{Scalar, Tensor};
