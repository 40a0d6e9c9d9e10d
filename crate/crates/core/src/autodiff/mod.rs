//! Minimal reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
mod graph;
pub mod kernels;
mod params;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use params::{init_uniform, Bound, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::{numel, DiffTensor};
