//! Dense tensors, a define-by-run reverse-mode tape, Adam, and finite
//! difference checking.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{GradMap, Graph, Var};
pub use params::{Param, ParamGroup, ParamStore};
pub use tensor::Tensor;
