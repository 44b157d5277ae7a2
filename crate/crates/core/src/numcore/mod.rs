//! Dense arrays with define-by-run reverse-mode differentiation.

mod array;
mod gemm;
mod gradcheck;
mod tape;

pub use array::NdArray;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{Gradients, SparseMap, Tape, Var};

/// Element type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("loss mask selects no elements")]
    EmptyMask,
    #[error("{0}")]
    InvalidArgument(String),
}
