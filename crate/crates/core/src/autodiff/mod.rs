//! Minimal reverse-mode automatic differentiation over dense matrices.

mod graph;
mod params;
mod sparsemax;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Init, Param, ParamId, ParamRegistry};
pub use sparsemax::sparsemax;
pub use tensor::Tensor;
