//! Dense tensors, a recording tape, and reverse-mode gradients.

mod fdcheck;
mod graph;
mod real;
mod tensor;

pub use fdcheck::{finite_diff_check, finite_diff_report, relative_error, FdReport};
pub use graph::{current_fault, set_fault, Fault, Gradients, Graph, Op, Var};
pub use real::Real;
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};
