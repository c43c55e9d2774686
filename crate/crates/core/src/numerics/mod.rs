//! Dense tensors, reverse-mode differentiation, parameters and the Adam
//! optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod nn;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Graph, NodeGrads, Var};
pub use nn::{layer_norm, sigmoid, softmax_row, Affine, GruCell, LayerNorm};
pub use params::{AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod op_gradients;
