//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use rng::{draw_mask, pass_stream_id, DropoutMask, RngStream};
pub use tensor::Tensor;
