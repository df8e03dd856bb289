//! Reverse-mode differentiation over matrices, the finite-difference
//! oracle, and the optimizer.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{finite_diff_check, finite_diff_report, FiniteDiffReport};
pub use graph::{softmax_rows, Gradients, Graph, GraphError, NodeId};
pub use optim::{adam_step, cosine_lr, default_warmup, AdamConfig, OptimizerState, TrainabilityMask};
pub use tensor::{ParamStore, Tensor};
