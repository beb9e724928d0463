//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! [`Tensor`] is a plain value. A forward pass runs on a [`Tape`], which hands
//! out [`Var`] handles; trainable state lives in a [`ParamStore`] and is
//! snapshotted onto the tape with [`Tape::param`].

mod gradcheck;
mod params;
mod tape;
mod value;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, ParamCheck};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, TapeMode, UnaryOp, Var};
pub use value::Tensor;


use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("structure error in {op}: {detail}")]
    Structure { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}
