//! Dense tensors and a minimal reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value array. Differentiable computation happens on a
//! [`Graph`]: every op records its inputs, and [`Graph::backward`] replays the
//! tape in reverse, summing contributions when a node feeds several consumers.
//!
//! Conventions:
//! - `conv1d` is a cross-correlation (the kernel is not flipped).
//! - `cross_entropy` averages over the batch.
//! - max-pool backward routes the gradient to the first maximal row.
//! - the only broadcast is a `[D]` bias added over the last axis.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;

pub use array::Tensor;
pub use gradcheck::{gradcheck, op_suite, relative_error};
pub use graph::{sigmoid, Activation, Graph, Padding, Var};
