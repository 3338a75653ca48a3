//! Hard patch-to-group assignment via cross-attention.
//!
//! Group tokens attend to patch tokens; each patch is assigned to exactly one
//! group through a straight-through Gumbel softmax over the attention logits.
//! The new group token is the group's residual plus the assignment-averaged
//! projected patches, refined by an MLP.

use super::params::GroupingP;
use crate::error::Result;
use crate::numerics::{Graph, RngStream, Scalar, Var};

/// How the hard assignment is drawn.
pub enum Assignment<'r> {
    /// Gumbel noise from the given stream, hard one-hot forward (training).
    Stochastic(&'r mut RngStream),
    /// No noise, hard argmax (evaluation; bit-deterministic).
    Deterministic,
    /// No noise, soft relaxation forward (gradient verification only).
    Soft,
}

impl Assignment<'_> {
    /// Reborrow so one mode value can be threaded through several calls.
    pub fn reborrow(&mut self) -> Assignment<'_> {
        match self {
            Assignment::Stochastic(r) => Assignment::Stochastic(r),
            Assignment::Deterministic => Assignment::Deterministic,
            Assignment::Soft => Assignment::Soft,
        }
    }
}

pub struct GroupingOut {
    /// Updated group tokens `[s, d]`.
    pub tokens: Var,
    /// Patch-to-group assignment `[n, s]`; rows are one-hot (hard modes).
    pub assign: Var,
}

/// Raw patch→group attention logits `[n, s]` (exposed for oracle tests).
pub fn assignment_logits<F: Scalar>(
    g: &mut Graph<F>,
    group_tokens: Var,
    patch_tokens: Var,
    p: &GroupingP<Var>,
) -> Result<Var> {
    let d = *g.shape(group_tokens).last().unwrap();
    let gn = g.layer_norm(group_tokens, p.ln_g_g, p.ln_g_b)?;
    let pn = g.layer_norm(patch_tokens, p.ln_p_g, p.ln_p_b)?;
    let q = g.matmul(gn, p.q_w)?; // [s, d]
    let k = g.matmul(pn, p.k_w)?; // [n, d]
    let qt = g.transpose2(q)?;
    let scores = g.matmul(k, qt)?; // [n, s]
    g.scale(scores, 1.0 / (d as f64).sqrt())
}

pub fn grouping_block<F: Scalar>(
    g: &mut Graph<F>,
    group_tokens: Var,
    patch_tokens: Var,
    p: &GroupingP<Var>,
    temperature: f64,
    mut mode: Assignment<'_>,
) -> Result<GroupingOut> {
    let logits = assignment_logits(g, group_tokens, patch_tokens, p)?;
    let assign = match &mut mode {
        Assignment::Stochastic(rng) => g.gumbel_softmax_st(logits, 1, temperature, Some(rng), true)?,
        Assignment::Deterministic => g.gumbel_softmax_st(logits, 1, temperature, None, true)?,
        Assignment::Soft => g.gumbel_softmax_st(logits, 1, temperature, None, false)?,
    };

    // Assignment-weighted mean of projected patches; empty groups pool zero
    // and keep only their residual.
    let pn = g.layer_norm(patch_tokens, p.ln_p_g, p.ln_p_b)?;
    let v = g.matmul(pn, p.v_w)?; // [n, d]
    let at = g.transpose2(assign)?; // [s, n]
    let pooled = g.matmul(at, v)?; // [s, d]
    let counts = g.sum_axis(assign, 0)?; // [s]
    let mean = g.div_rows(pooled, counts, 1e-6)?;
    let update = g.matmul(mean, p.o_w)?;
    let tokens = g.add(group_tokens, update)?;

    // MLP refinement with residual.
    let n2 = g.layer_norm(tokens, p.ln2_g, p.ln2_b)?;
    let h = g.matmul(n2, p.mlp1_w)?;
    let h = g.add_bcast(h, p.mlp1_b)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.mlp2_w)?;
    let h = g.add_bcast(h, p.mlp2_b)?;
    let tokens = g.add(tokens, h)?;

    Ok(GroupingOut { tokens, assign })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::config::ModelConfig;
    use crate::encoders::params::EncoderParams;
    use crate::numerics::Tensor;

    fn setup(seed: u64) -> (ModelConfig, EncoderParams<Tensor<f64>>) {
        let cfg = ModelConfig::tiny();
        let mut rng = RngStream::new(seed, "grouping-test");
        let p = EncoderParams::init(&cfg, 23, &mut rng);
        (cfg, p)
    }

    #[test]
    fn single_group_takes_all_patches_and_pools_their_mean() {
        let (cfg, p) = setup(4);
        let mut rng = RngStream::new(5, "x");
        let patches = Tensor::<f64>::from_fn(vec![5, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));
        let group = Tensor::<f64>::from_fn(vec![1, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));

        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g).unwrap();
        let gv = g.constant(group.clone()).unwrap();
        let pv = g.constant(patches.clone()).unwrap();
        let out = grouping_block(
            &mut g,
            gv,
            pv,
            &bound.grouping1,
            1.0,
            Assignment::Deterministic,
        )
        .unwrap();

        // all patches assigned to the single group
        for i in 0..5 {
            assert_eq!(g.value(out.assign).at(&[i, 0]), 1.0);
        }

        // straight-line oracle for the token update
        let gp = &bound.grouping1;
        let pn = g.layer_norm(pv, gp.ln_p_g, gp.ln_p_b).unwrap();
        let v = g.matmul(pn, gp.v_w).unwrap();
        let vmean = Tensor::<f64>::from_fn(vec![1, cfg.dim], |j| {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += g.value(v).at(&[i, j]);
            }
            acc / (5.0 + 1e-6) // div_rows epsilon
        });
        let vm = g.constant(vmean).unwrap();
        let upd = g.matmul(vm, gp.o_w).unwrap();
        let t = g.add(gv, upd).unwrap();
        let n2 = g.layer_norm(t, gp.ln2_g, gp.ln2_b).unwrap();
        let h = g.matmul(n2, gp.mlp1_w).unwrap();
        let h = g.add_bcast(h, gp.mlp1_b).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.matmul(h, gp.mlp2_w).unwrap();
        let h = g.add_bcast(h, gp.mlp2_b).unwrap();
        let want = g.add(t, h).unwrap();
        for (a, b) in g.value(out.tokens).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn assignment_rows_sum_to_exactly_one() {
        let (cfg, p) = setup(6);
        let mut rng = RngStream::new(7, "x");
        let patches = Tensor::<f64>::from_fn(vec![4, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));
        let groups = Tensor::<f64>::from_fn(vec![2, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g).unwrap();
        let gv = g.constant(groups).unwrap();
        let pv = g.constant(patches).unwrap();
        let mut noise = RngStream::new(8, "gumbel");
        let out = grouping_block(
            &mut g,
            gv,
            pv,
            &bound.grouping1,
            1.0,
            Assignment::Stochastic(&mut noise),
        )
        .unwrap();
        for i in 0..4 {
            let row: Vec<f64> = (0..2).map(|s| g.value(out.assign).at(&[i, s])).collect();
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn noise_free_assignment_matches_exhaustive_argmax_oracle() {
        // 4 patches, 2 groups: enumerate the logits directly and compare.
        let (cfg, p) = setup(9);
        let mut rng = RngStream::new(10, "x");
        let patches = Tensor::<f64>::from_fn(vec![4, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));
        let groups = Tensor::<f64>::from_fn(vec![2, cfg.dim], |_| rng.uniform_range(-1.0, 1.0));
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g).unwrap();
        let gv = g.constant(groups).unwrap();
        let pv = g.constant(patches).unwrap();
        let logits = assignment_logits(&mut g, gv, pv, &bound.grouping1).unwrap();
        let out = grouping_block(
            &mut g,
            gv,
            pv,
            &bound.grouping1,
            1.0,
            Assignment::Deterministic,
        )
        .unwrap();
        for i in 0..4 {
            let l: Vec<f64> = (0..2).map(|s| g.value(logits).at(&[i, s])).collect();
            let want = if l[0] >= l[1] { 0 } else { 1 };
            for s in 0..2 {
                let expect = if s == want { 1.0 } else { 0.0 };
                assert_eq!(g.value(out.assign).at(&[i, s]), expect, "patch {i}");
            }
        }
    }
}
