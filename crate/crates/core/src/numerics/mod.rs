//! Dense tensors, reverse-mode differentiation, and a finite-difference
//! gradient oracle.

mod gradcheck;
pub mod lstm;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use lstm::{blstm, lstm_cell, lstm_sequence, lstm_step, LstmVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Softmax of a plain slice along its whole length.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    tape::softmax_into(xs, &mut out);
    out
}
