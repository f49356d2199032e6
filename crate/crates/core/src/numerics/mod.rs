//! Dense `f64` tensors, a reverse-mode tape, and a central-difference gradient
//! checker. Everything trainable in [`crate::model`] and [`crate::grpo`] is
//! recorded on a [`Tape`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, EntryFailure, Evaluation, GradCheckConfig, GradCheckReport, Objective};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, softmax_in_place, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective failed: {0}")]
    Objective(String),
}
