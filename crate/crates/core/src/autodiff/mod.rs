//! Reverse-mode differentiation over small dense matrices, the Adam
//! optimizer, and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, relative_error, BlockReport, GradCheckReport};
pub use graph::{Adjoints, BackwardFn, Graph, Var};
pub use params::{Gradients, ParamBinding, ParamId, ParamStore};
pub use tensor::Tensor;
