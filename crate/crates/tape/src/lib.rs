//! A small eager reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Every op computes its value immediately and records just enough state on
//! the [`Graph`] to run its adjoint. Nothing is multithreaded, so a given
//! sequence of ops always produces bit-identical values and gradients.

mod attention;
mod conv;
pub mod gemm;
mod graph;
pub mod kernels;
mod tensor;

pub use attention::{window_attention_forward, AttnForward, WindowProbs, WindowSpec};
pub use conv::{conv3d_forward, conv3d_output_shape, ConvSpec};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::{strides_of, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape error: {0}")]
    Shape(String),
}
