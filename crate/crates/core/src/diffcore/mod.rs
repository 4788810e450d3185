//! Dense tensors, reverse-mode gradients, Adam and finite-difference checks.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{xavier_uniform, AdamConfig, Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
