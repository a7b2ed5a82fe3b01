//! A small reverse-mode automatic differentiation engine for convolutional
//! networks on NCHW tensors.
//!
//! Values are recorded on a [`Graph`] as operations execute; [`Graph::backward`]
//! replays the tape in reverse. Parameters live in a [`ParamStore`] and are put
//! on a graph with [`Bound::new`]. Convolutions are lowered onto GEMM.

mod conv;
mod float;
mod graph;
mod params;
mod tensor;

pub mod check;
pub mod spectral;

pub use float::{DType, Float};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    Shape { op: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("{op}: expected a rank-{expected} tensor, found shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a single-element tensor, found shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
