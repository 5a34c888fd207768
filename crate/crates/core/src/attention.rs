//! Multi-synonyms attention.
//!
//! The hidden matrix `H: [N, h]` is split column-wise into `M` heads of
//! width `h/M`. Synonym `j` of a code scores head `j` of every position,
//! `softmax((q^j·W_Q + b_Q) · tanh(H^j·W_H + b_H))`, and the resulting
//! distribution pools the *full* `H` into a context of width `h`. The
//! code-wise representation is the elementwise max over the `M` contexts.
//!
//! [`codewise_batched`] computes all documents, codes and synonyms at once
//! with two contractions; [`attend`] and [`codewise_repr`] are the
//! per-(code, synonym) formulation.

use std::sync::Arc;

use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

/// `W_Q: [h, h/M]`, `W_H: [h/M, h/M]` and their biases, shared by every
/// code, synonym and head. Weights start Glorot-uniform, biases at zero.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, h: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let dh = head_width(h, heads)?;
        let w_q = store.add("attention.w_q", glorot_uniform(&[h, dh], rng));
        let w_h = store.add("attention.w_h", glorot_uniform(&[dh, dh], rng));
        let b_q = store.add("attention.b_q", Tensor::zeros(&[dh]));
        let b_h = store.add("attention.b_h", Tensor::zeros(&[dh]));
        Ok(Self {
            w_q,
            b_q,
            w_h,
            b_h,
            heads,
        })
    }
}

pub fn head_width(h: usize, heads: usize) -> Result<usize> {
    if heads == 0 || h % heads != 0 {
        return Err(Error::invalid(format!("hidden width {h} is not divisible into {heads} heads")));
    }
    Ok(h / heads)
}

/// Contiguous column blocks `[N, h/M]` of `H: [N, h]`.
pub fn split_heads<T: Real>(g: &mut Graph<T>, hidden: Var, heads: usize) -> Result<Vec<Var>> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("split_heads expects [N, h], got {shape:?}")));
    }
    if heads == 1 {
        return Ok(vec![hidden]);
    }
    let dh = head_width(shape[1], heads)?;
    (0..heads).map(|j| g.narrow(hidden, 1, j * dh, dh)).collect()
}

/// Attention of synonym query `q: [h]` on head `head` of `hidden: [N, h]`.
/// Returns the distribution `[N]` and the context `Hᵀα: [h]`.
pub fn attend<T: Real>(
    pass: &mut Pass<'_, T>,
    params: &AttentionParams,
    hidden: Var,
    query: Var,
    head: usize,
) -> Result<(Var, Var)> {
    let shape = pass.graph.shape(hidden).to_vec();
    if shape.len() != 2 || pass.graph.shape(query) != [shape[1]] {
        return Err(Error::shape("attend", &shape, pass.graph.shape(query)));
    }
    let (n, h) = (shape[0], shape[1]);
    let dh = head_width(h, params.heads)?;
    if head >= params.heads {
        return Err(Error::invalid(format!("head {head} of {}", params.heads)));
    }
    let (w_q, b_q, w_h, b_h) = (pass.param(params.w_q), pass.param(params.b_q), pass.param(params.w_h), pass.param(params.b_h));
    let g = &mut *pass.graph;

    let head_states = g.narrow(hidden, 1, head * dh, dh)?;
    let keys = g.matmul(head_states, w_h)?;
    let keys = g.add_bias(keys, b_h)?;
    let keys = g.tanh(keys);

    let q = g.reshape(query, &[1, h])?;
    let q = g.matmul(q, w_q)?;
    let q = g.add_bias(q, b_q)?;
    let q = g.reshape(q, &[dh, 1])?;

    let scores = g.matmul(keys, q)?;
    let scores = g.reshape(scores, &[n])?;
    let alpha = g.softmax(scores, 0)?;
    let context = g.contract("n,nh->h", alpha, hidden)?;
    Ok((alpha, context))
}

/// `v = max_j Hᵀα^j` over the queries `{q^j}`; query `j` uses head `j`.
pub fn codewise_repr<T: Real>(pass: &mut Pass<'_, T>, params: &AttentionParams, hidden: Var, queries: &[Var]) -> Result<Var> {
    if queries.len() != params.heads {
        return Err(Error::invalid(format!("{} queries for {} heads", queries.len(), params.heads)));
    }
    let mut contexts = Vec::with_capacity(queries.len());
    for (j, &q) in queries.iter().enumerate() {
        contexts.push(attend(pass, params, hidden, q, j)?.1);
    }
    pass.graph.maxpool(&contexts)
}

/// Output of [`codewise_batched`].
#[derive(Clone, Copy, Debug)]
pub struct Codewise {
    /// `[B, C, h]`
    pub reprs: Var,
    /// `[B, C, N, M]`, zero at padded positions.
    pub alphas: Var,
}

/// All code-wise representations for a padded document batch.
///
/// `hidden: [B, N, h]` with per-document `lengths`, `queries: [C, M, h]`.
/// Scores are the contraction `[B,N,M,h/M] × [C,M,h/M] → [B,C,N,M]` and
/// contexts `[B,C,N,M] × [B,N,h] → [B,C,h,M]`.
pub fn codewise_batched<T: Real>(
    pass: &mut Pass<'_, T>,
    params: &AttentionParams,
    hidden: Var,
    lengths: &[usize],
    queries: Var,
) -> Result<Codewise> {
    let hs = pass.graph.shape(hidden).to_vec();
    let qs = pass.graph.shape(queries).to_vec();
    if hs.len() != 3 || qs.len() != 3 || hs[2] != qs[2] || qs[1] != params.heads || lengths.len() != hs[0] {
        return Err(Error::shape("codewise_batched", &hs, &qs));
    }
    let (b, n, h) = (hs[0], hs[1], hs[2]);
    let (c, m) = (qs[0], qs[1]);
    let dh = head_width(h, m)?;
    let (w_q, b_q, w_h, b_h) = (pass.param(params.w_q), pass.param(params.b_q), pass.param(params.w_h), pass.param(params.b_h));
    let g = &mut *pass.graph;

    // [B,N,h] viewed as [B·N·M, h/M] is exactly the head split.
    let heads = g.reshape(hidden, &[b * n * m, dh])?;
    let keys = g.matmul(heads, w_h)?;
    let keys = g.add_bias(keys, b_h)?;
    let keys = g.tanh(keys);
    let keys = g.reshape(keys, &[b, n, m, dh])?;

    let q = g.reshape(queries, &[c * m, h])?;
    let q = g.matmul(q, w_q)?;
    let q = g.add_bias(q, b_q)?;
    let q = g.reshape(q, &[c, m, dh])?;

    let mut scores = g.contract("bnmd,cmd->bcnm", keys, q)?;
    if lengths.iter().any(|&l| l < n) {
        let mut mask = Vec::with_capacity(b * c * n * m);
        for &len in lengths {
            for _ in 0..c {
                for t in 0..n {
                    mask.extend(std::iter::repeat(t >= len).take(m));
                }
            }
        }
        scores = g.masked_fill(scores, Arc::new(mask), T::neg_infinity())?;
    }
    let alphas = g.softmax(scores, 2)?;
    let contexts = g.contract("bcnm,bnh->bchm", alphas, hidden)?;
    let reprs = g.max_axis(contexts, 3)?;
    Ok(Codewise { reprs, alphas })
}
