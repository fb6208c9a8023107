//! Differentiable-operation substrate: dense tensors, a reverse-mode tape,
//! AdamW, finite-difference gradient checking and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_steps, relative_error, GradCheckReport, REL_ERR_FLOOR, STEP_SEARCH_STOP};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{AdamWConfig, OptimizerState, Schedule};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;

pub(crate) use tensor::squared_distance;
