//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Enough to train small denoisers and to push reconstruction loss through an
//! unrolled sampler into measurement-matrix parameters: a [`Tensor`] value
//! type, a recorded-graph autodiff engine, and an Adam optimizer.

pub mod adam;
pub mod graph;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{finite_diff_grad, Cx, Eager, Forward, Graph, GraphBuilder, NodeId};
pub use tensor::Tensor;
