//! A compact reverse-mode automatic differentiation tape over `f64`
//! `ndarray` tensors, with the handful of layers and the optimizer the
//! `facedepth` models are built from.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var, GATHER_ZERO};
pub use optim::Adam;
pub use params::{ParamGrads, ParamId, ParamStore, Session};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` missing from source")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
