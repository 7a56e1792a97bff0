//! LSTM recurrence built from tape primitives, so back-propagation through
//! time falls out of the ordinary reverse sweep.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tape handles for one LSTM direction. Gate blocks are ordered
/// input, forget, candidate, output along the `4 * hidden` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[d_in, 4h]`
    pub w_ih: Var,
    /// `[h, 4h]`
    pub w_hh: Var,
    /// `[4h]`
    pub bias: Var,
}

impl LstmVars {
    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.w_hh)[0]
    }
}

/// One recurrence step from already-projected input pre-activations
/// `z_in = x_t W_ih + b` (length `4h`).
pub fn lstm_step(tape: &mut Tape, z_in: Var, h_prev: Var, c_prev: Var, w_hh: Var) -> Result<(Var, Var)> {
    let h = tape.shape(w_hh)[0];
    if tape.shape(h_prev) != [h] || tape.shape(c_prev) != [h] || tape.shape(z_in) != [4 * h] {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: tape.shape(h_prev).to_vec(),
            right: tape.shape(w_hh).to_vec(),
        });
    }
    let h_row = tape.reshape(h_prev, &[1, h])?;
    let rec = tape.matmul(h_row, w_hh)?;
    let rec = tape.reshape(rec, &[4 * h])?;
    let z = tape.add(z_in, rec)?;

    let zi = tape.slice(z, 0, h)?;
    let zf = tape.slice(z, h, h)?;
    let zg = tape.slice(z, 2 * h, h)?;
    let zo = tape.slice(z, 3 * h, h)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// A single LSTM cell update `(x_t, h_prev, c_prev) -> (h_t, c_t)`.
pub fn lstm_cell(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let d_in = tape.shape(p.w_ih)[0];
    if tape.shape(x_t) != [d_in] {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(x_t).to_vec(),
            right: tape.shape(p.w_ih).to_vec(),
        });
    }
    let x_row = tape.reshape(x_t, &[1, d_in])?;
    let z = tape.matmul(x_row, p.w_ih)?;
    let z = tape.add_bias(z, p.bias)?;
    let z = tape.reshape(z, &[tape.shape(z)[1]])?;
    lstm_step(tape, z, h_prev, c_prev, p.w_hh)
}

/// Runs one direction over a `[T, d_in]` sequence from a zero state and
/// returns the hidden states as `[T, h]` in input time order.
pub fn lstm_sequence(tape: &mut Tape, xs: Var, p: &LstmVars, reverse: bool) -> Result<Var> {
    let t_len = tape.shape(xs)[0];
    let h = p.hidden(tape);
    // Input projection for every frame at once.
    let z_all = tape.matmul(xs, p.w_ih)?;
    let z_all = tape.add_bias(z_all, p.bias)?;

    let mut h_t = tape.constant(Tensor::zeros(&[h]));
    let mut c_t = tape.constant(Tensor::zeros(&[h]));
    let mut outs = vec![h_t; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let z_in = tape.row(z_all, t)?;
        (h_t, c_t) = lstm_step(tape, z_in, h_t, c_t, p.w_hh)?;
        outs[t] = h_t;
    }
    tape.stack(&outs)
}

/// Bidirectional layer: `[T, d_in] -> [T, 2h]`, forward states first.
pub fn blstm(tape: &mut Tape, xs: Var, fwd: &LstmVars, bwd: &LstmVars) -> Result<Var> {
    let hf = lstm_sequence(tape, xs, fwd, false)?;
    let hb = lstm_sequence(tape, xs, bwd, true)?;
    tape.concat_cols(hf, hb)
}
