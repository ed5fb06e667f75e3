//! The layers the planning models are built from, composed from tape primitives.

use super::{Tape, Var};
use crate::error::{Error, Result};

/// `input · weight + bias`, with `bias` of shape `[1, out]`.
pub fn linear(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(input, weight)?;
    tape.add_row(y, bias)
}

/// Row-wise layer normalization followed by a per-feature gain and shift.
pub fn layer_norm(tape: &mut Tape, input: Var, gain: Var, shift: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(input);
    let scaled = tape.mul_row(n, gain)?;
    tape.add_row(scaled, shift)
}

/// `normalize(input) * (1 + scale) + shift`, where `scale` and `shift` are
/// `[1, d]` rows produced from a conditioning vector.
pub fn adaptive_modulate(tape: &mut Tape, input: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(input);
    let one_plus = tape.add_scalar(scale, 1.0);
    let scaled = tape.mul_row(n, one_plus)?;
    tape.add_row(scaled, shift)
}

/// Scaled dot-product attention `softmax(q kᵀ / sqrt(d)) v`.
///
/// `mask[j] == false` hides key `j` from every query.
pub fn attention(tape: &mut Tape, query: Var, key: Var, value: Var, mask: Option<&[bool]>) -> Result<Var> {
    let [_, dq] = tape.shape(query);
    let [nk, dk] = tape.shape(key);
    let [nv, _] = tape.shape(value);
    if dq != dk {
        return Err(Error::shape("attention query/key", &tape.shape(query), &tape.shape(key)));
    }
    if nk != nv {
        return Err(Error::shape("attention key/value", &tape.shape(key), &tape.shape(value)));
    }
    let kt = tape.transpose(key);
    let logits = tape.matmul(query, kt)?;
    let logits = tape.scale(logits, 1.0 / (dq as f64).sqrt());
    let weights = tape.softmax_rows(logits, mask)?;
    tape.matmul(weights, value)
}

/// Attention with `heads` heads over column slices of already-projected q, k, v.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    if heads <= 1 {
        return attention(tape, query, key, value, mask);
    }
    let d = tape.shape(query)[1];
    if d % heads != 0 || tape.shape(value)[1] != d {
        return Err(Error::shape("multi_head_attention", &tape.shape(query), &[heads]));
    }
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(query, h * hd, hd)?;
        let k = tape.slice_cols(key, h * hd, hd)?;
        let v = tape.slice_cols(value, h * hd, hd)?;
        outs.push(attention(tape, q, k, v, mask)?);
    }
    tape.concat_cols(&outs)
}

pub fn gelu(tape: &mut Tape, input: Var) -> Var {
    tape.gelu(input)
}

/// Mean squared error between two same-shaped arrays.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean binary cross-entropy on logits: `softplus(x) - y * x`.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Var) -> Result<Var> {
    let sp = tape.softplus(logits);
    let yx = tape.mul(targets, logits)?;
    let per = tape.sub(sp, yx)?;
    Ok(tape.mean(per))
}
