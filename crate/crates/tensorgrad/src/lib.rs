//! Minimal differentiable tensor substrate.
//!
//! Dense row-major tensors ([`Tensor`]), a closed set of primitives recorded
//! on a [`Tape`], and reverse-mode gradients of scalar outputs. Everything is
//! generic over [`Element`] so the same backward rules can be checked in
//! `f64` against [`finite_difference_gradient`].

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_gradient;
pub use kernels::PadMode;
pub use tape::{Conv2dParams, OpKind, Tape, Var, GROUP_NORM_EPS};
pub use tensor::{Element, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidParam { op: &'static str, detail: String },
    #[error("backward needs a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown variable {0}")]
    UnknownVar(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
