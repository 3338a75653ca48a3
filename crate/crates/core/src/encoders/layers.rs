//! Pre-norm transformer building blocks on rank-2 token matrices.

use super::params::{LayerP, MlpP};
use crate::error::Result;
use crate::numerics::{Graph, Scalar, Var};

pub fn linear<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bcast(y, b)
}

/// Two-layer MLP with GELU.
pub fn mlp<F: Scalar>(g: &mut Graph<F>, x: Var, p: &MlpP<Var>) -> Result<Var> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.gelu(h)?;
    linear(g, h, p.w2, p.b2)
}

/// Multi-head self-attention over `x: [T, C]`, heads split by column slices.
fn self_attention<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    p: &LayerP<Var>,
    heads: usize,
    attn_mask: Option<Var>,
) -> Result<Var> {
    let c = *g.shape(x).last().unwrap();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(g, x, p.q_w, p.q_b)?;
    let k = linear(g, x, p.k_w, p.k_b)?;
    let v = linear(g, x, p.v_w, p.v_b)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose2(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(mask) = attn_mask {
            scores = g.add(scores, mask)?;
        }
        let att = g.softmax(scores, 1)?;
        head_outs.push(g.matmul(att, vh)?);
    }
    let cat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        g.concat_cols(&head_outs)?
    };
    linear(g, cat, p.o_w, p.o_b)
}

/// Pre-norm transformer layer: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
pub fn transformer_layer<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    p: &LayerP<Var>,
    heads: usize,
    attn_mask: Option<Var>,
) -> Result<Var> {
    let n1 = g.layer_norm(x, p.ln1_g, p.ln1_b)?;
    let att = self_attention(g, n1, p, heads, attn_mask)?;
    let x = g.add(x, att)?;
    let n2 = g.layer_norm(x, p.ln2_g, p.ln2_b)?;
    let m = {
        let h = linear(g, n2, p.mlp1_w, p.mlp1_b)?;
        let h = g.gelu(h)?;
        linear(g, h, p.mlp2_w, p.mlp2_b)?
    };
    g.add(x, m)
}
