//! Dense `f32` tensors, a recording graph with reverse-mode gradients, and
//! the Adam optimizer.

mod graph;
mod param;
mod tensor;

pub use graph::{Graph, Var, LN_EPS};
pub use param::{clip_param_grad_norm, Adam, Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;
