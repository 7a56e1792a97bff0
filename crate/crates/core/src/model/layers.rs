//! Encoder, attention pooling and classification head as tape computations.

use super::config::CrnnConfig;
use super::params::{ClassifierVars, SsaVars};
use crate::error::{Error, Result};
use crate::numerics::{blstm, Tape, Var};

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { layer: layer.into() })
    }
}

/// Convolutions, pooling and the linear projection: `[C, T, F] -> [T/2, linear_units]`.
pub fn pre_recurrent(tape: &mut Tape, x: Var, cfg: &CrnnConfig, p: &ClassifierVars) -> Result<Var> {
    let expected = cfg.input_shape();
    if tape.shape(x) != expected {
        return Err(Error::ShapeMismatch {
            op: "crnn_encode",
            left: tape.shape(x).to_vec(),
            right: expected.to_vec(),
        });
    }
    let mut h = x;
    for (i, &(k, b)) in p.convs.iter().enumerate() {
        h = tape.conv2d(h, k, b)?;
        h = tape.leaky_relu(h, cfg.leaky_slope);
        if i == 0 {
            h = tape.maxpool2(h)?;
        }
        check_finite(tape, h, &format!("conv{}", i + 1))?;
    }
    let frames = tape.frames_from_channels(h)?;
    let lin = tape.matmul(frames, p.linear.0)?;
    let lin = tape.add_bias(lin, p.linear.1)?;
    let lin = tape.leaky_relu(lin, cfg.leaky_slope);
    check_finite(tape, lin, "linear")
}

/// Full encoder: `[C, T, F] -> [T/2, 2 * lstm_cells]`.
pub fn crnn_encode(tape: &mut Tape, x: Var, cfg: &CrnnConfig, p: &ClassifierVars) -> Result<Var> {
    let lin = pre_recurrent(tape, x, cfg, p)?;
    let h = blstm(tape, lin, &p.fwd, &p.bwd)?;
    check_finite(tape, h, "blstm")
}

/// `h: [T, d]`, `w: [d]` -> `[T]` scores `h w`.
fn project(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let d = tape.shape(w)[0];
    let t = tape.shape(h)[0];
    let col = tape.reshape(w, &[d, 1])?;
    let s = tape.matmul(h, col)?;
    tape.reshape(s, &[t])
}

/// `alpha: [T]`, `h: [T, d]` -> `sum_t alpha_t h_t`.
fn weighted_sum(tape: &mut Tape, alpha: Var, h: Var) -> Result<Var> {
    let t = tape.shape(h)[0];
    let d = tape.shape(h)[1];
    let row = tape.reshape(alpha, &[1, t])?;
    let c = tape.matmul(row, h)?;
    tape.reshape(c, &[d])
}

/// Softmax pooling over frames with one scoring vector.
/// Returns `(alpha: [T], context: [d])`.
pub fn self_attention(tape: &mut Tape, h: Var, w: Var) -> Result<(Var, Var)> {
    let scores = project(tape, h, w)?;
    let alpha = tape.softmax(scores)?;
    let c = weighted_sum(tape, alpha, h)?;
    Ok((alpha, c))
}

/// Query-key-value pooling where emotion-tower queries attend over keys and
/// values drawn from both towers.
///
/// `q = h_em w_q`, `K = [h_em w_k_em ; h_sp w_k_sp]`, `V` likewise, all
/// scalars per frame; `alpha = softmax(q K^T / sqrt(T)) V` with the softmax
/// over the `2T` keys; `c = sum_t alpha_t h_em_t`.
pub fn speaker_attention(tape: &mut Tape, h_em: Var, h_sp: Var, p: &SsaVars) -> Result<(Var, Var)> {
    if tape.shape(h_em)[0] != tape.shape(h_sp)[0] {
        return Err(Error::ShapeMismatch {
            op: "speaker_attention",
            left: tape.shape(h_em).to_vec(),
            right: tape.shape(h_sp).to_vec(),
        });
    }
    let t = tape.shape(h_em)[0];
    let q = project(tape, h_em, p.w_q_em)?;
    let k_em = project(tape, h_em, p.w_k_em)?;
    let k_sp = project(tape, h_sp, p.w_k_sp)?;
    let v_em = project(tape, h_em, p.w_v_em)?;
    let v_sp = project(tape, h_sp, p.w_v_sp)?;
    let keys = tape.concat(&[k_em, k_sp])?;
    let values = tape.concat(&[v_em, v_sp])?;

    let q_col = tape.reshape(q, &[t, 1])?;
    let k_row = tape.reshape(keys, &[1, 2 * t])?;
    let scores = tape.matmul(q_col, k_row)?;
    let scores = tape.scale(scores, 1.0 / (t as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let v_col = tape.reshape(values, &[2 * t, 1])?;
    let alpha = tape.matmul(weights, v_col)?;
    let alpha = tape.reshape(alpha, &[t])?;
    let c = weighted_sum(tape, alpha, h_em)?;
    Ok((alpha, c))
}

/// Embedding layer then classification layer. Returns `(embedding, logits)`.
pub fn classify(tape: &mut Tape, c: Var, p: &ClassifierVars) -> Result<(Var, Var)> {
    let d = tape.shape(c)[0];
    let row = tape.reshape(c, &[1, d])?;
    let e = tape.matmul(row, p.embed.0)?;
    let e = tape.add_bias(e, p.embed.1)?;
    let logits = tape.matmul(e, p.classify.0)?;
    let logits = tape.add_bias(logits, p.classify.1)?;
    let n_emb = tape.shape(e)[1];
    let k = tape.shape(logits)[1];
    let e = tape.reshape(e, &[n_emb])?;
    let logits = tape.reshape(logits, &[k])?;
    Ok((e, logits))
}
