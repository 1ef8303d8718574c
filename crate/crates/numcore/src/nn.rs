//! Composite layers built from tape primitives.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};

/// `x · w + b` for `x` of shape `[in]` or `[n, in]`, `w` of shape `[in, out]`.
pub fn linear(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match shape.len() {
        1 => {
            let row = g.reshape(x, &[1, shape[0]])?;
            let y = g.matmul(row, w)?;
            let y = g.add_bias(y, b)?;
            let out = g.shape(y)[1];
            g.reshape(y, &[out])
        }
        2 => {
            let y = g.matmul(x, w)?;
            g.add_bias(y, b)
        }
        _ => invalid("linear", format!("unsupported input shape {shape:?}")),
    }
}

/// Projection weights for one attention block (`[d, d]` matrices, `[d]` biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over the rows of `x: [len, d]` with
/// `heads` equal-width heads. No masking and no positional information.
pub fn multihead_attention(g: &mut Graph<'_>, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return invalid("multihead_attention", format!("expected [len, d], got {shape:?}"));
    }
    let d = shape[1];
    if heads == 0 || d % heads != 0 {
        return invalid("multihead_attention", format!("{d} not divisible into {heads} heads"));
    }
    let dh = d / heads;
    let q = linear(g, x, w.wq, w.bq)?;
    let k = linear(g, x, w.wk, w.bk)?;
    let v = linear(g, x, w.wv, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, joined, w.wo, w.bo)
}
