//! Differentiable numerics: tensors, a reverse-mode tape, layers, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_param, REL_FLOOR};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
