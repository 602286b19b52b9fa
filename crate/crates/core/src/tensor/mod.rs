//! Minimal deterministic tensor algebra: dense tensors, a recorded
//! computation graph with reverse-mode differentiation, and AdamW.

mod graph;
mod init;
mod optim;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{log_softmax_vec, softmax_vec, Gradients, Graph, Var, MASK_NEG};
pub use init::truncated_normal;
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{ParamId, Params};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
