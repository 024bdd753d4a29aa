//! Dense tensors, reverse-mode autodiff, AdamW and gradient checking.

pub mod checkpoint;
mod graph;
pub mod gradcheck;
mod optim;
mod params;
pub mod rng;
mod scalar;
mod tensor;

pub use graph::{topk_indices, Graph, Var};
pub(crate) use graph::matmul_into;
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::ParamStore;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
