use crate::error::{Result, TensorError};
use crate::{Float, Graph, Var};

/// Graph handles of one attention layer's projections. Weights are
/// `[D, D]` in `[out, in]` layout, biases `[D]`.
///
/// The key projection has no bias: it would add the same amount to every
/// score of a query row, which the softmax cancels, so its gradient is
/// identically zero.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over `tokens: [N, T, D]` with `heads`
/// heads, concatenated and output-projected.
///
/// No positional information is injected here, so the op is equivariant to
/// permutations of the token axis.
pub fn multi_head_self_attention<T: Float>(
    g: &mut Graph<T>,
    tokens: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::shape("attention", format!("tokens must be [N, T, D], got {shape:?}")));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::config("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, w: Var, b: Option<Var>| -> Result<Var> {
        let y = g.linear(tokens, w, b)?;
        let y = g.reshape(y, &[n, t, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[n * heads, t, dh])
    };
    let q = split(g, p.wq, Some(p.bq))?;
    let k = split(g, p.wk, None)?;
    let v = split(g, p.wv, Some(p.bv))?;
    let scores = g.batch_matmul(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.batch_matmul(attn, v, false, false)?;
    let ctx = g.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, t, d])?;
    g.linear(ctx, p.wo, Some(p.bo))
}
