//! Dense tensor math with reverse-mode gradients.
//!
//! Everything runs in `f64`. Forward values, gradients and the finite-
//! difference oracle share one precision, so gradient checks stay tight.

pub mod attention;
pub mod gradcheck;
pub mod kernels;
pub mod lstm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::scaled_dot_attention;
pub use gradcheck::{finite_diff_check, finite_diff_check_only, GradCheckReport};
pub use lstm::{bilstm_encode, lstm_step, lstm_vars, LstmParams};
pub use params::{backward, Graph, ParamGrads, ParamSet};
pub use tape::{Gradients, LstmVars, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// `x · Wᵀ + b` for `x` of shape N×D_in (or D_in), `W` D_out×D_in.
pub fn dense_apply(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.dense(x, w, Some(b))
}

/// Softmax over the last axis.
pub fn softmax(tape: &mut Tape, x: Var) -> Var {
    tape.softmax_rows(x)
}
