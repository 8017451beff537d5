//! Dense `f64` matrices and a single-use reverse-mode tape.
//!
//! The tape covers exactly the operations the networks need: products,
//! elementwise arithmetic, ELU, reductions, column concatenation and row
//! gathering. Second-order terms for the gradient penalty are handled by
//! [`mlp_input_gradient`], which writes a network's input gradient out as
//! a first-order expression.

mod input_grad;
mod matrix;
mod tape;

use thiserror::Error;

pub use input_grad::{mlp_input_gradient, LayerVars};
pub(crate) use input_grad::forward_with_preactivations;
pub use matrix::Matrix;
pub use tape::{elu, elu_derivative, Axis, ElementwiseOp, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("backward already ran on this tape")]
    TapeConsumed,
}

impl AutodiffError {
    pub(crate) fn dimension(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::Dimension { op, left, right }
    }
}
