//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! A [`Graph`] records each operation together with whatever the backward
//! pass needs (im2col buffers, softmax outputs, norms). Ops are coarse:
//! convolution, row softmax, margin logits and cross-entropy each carry a
//! hand-derived vector-Jacobian product instead of being composed from
//! scalar primitives.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, Var, COS_CLAMP};
