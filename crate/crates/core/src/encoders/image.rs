//! Image encoder: patch embedding → contextual layers → progressive stack →
//! two grouping stages → segment tokens → joint-space projection.
//!
//! The same per-layer feature enhancement (adding the previous layer's patch
//! features) runs in every branch; the mixed branch adds the *mixed* original
//! features instead, so a degenerate one-image mix reproduces this branch
//! bit for bit.

use super::config::ModelConfig;
use super::grouping::{grouping_block, Assignment};
use super::layers::{linear, mlp, transformer_layer};
use super::params::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::raster::Raster;

/// Outputs of one encoder branch for one image.
pub struct BranchOutput {
    /// Patch→segment attention map `[N, s2]`; rows sum to 1.
    pub attention: Var,
    /// Segment tokens `[s2, d]`.
    pub seg_tokens: Var,
    /// Per-segment joint-space embeddings `[s2, D]`, unit rows.
    pub seg_embed: Var,
    /// Pooled joint-space embedding `[D]`, unit norm.
    pub z: Var,
}

/// Original-branch intermediates needed by the mixed branch.
pub struct OriginalTrace {
    /// Patch embedding plus positions, before the contextual layers `[N, d]`.
    pub embedded: Var,
    /// Contextual-layer output `[N, d]` (the features that get mixed).
    pub ctx: Var,
    /// Patch tokens after each progressive layer (`progressive_layers` of them).
    pub stage1_patches: Vec<Var>,
    pub out: BranchOutput,
}

/// Flatten a raster into the `[N, patch²·3]` patch matrix.
pub fn patch_matrix<F: Scalar>(cfg: &ModelConfig, image: &Raster) -> Result<Tensor<F>> {
    if image.h != cfg.image_size || image.w != cfg.image_size {
        return Err(Error::Config(format!(
            "image is {}x{}, config expects {}x{}",
            image.h, image.w, cfg.image_size, cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let n = side * side;
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(n * pd);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    let pix = image.pixel(py * p + dy, px * p + dx);
                    data.push(F::of(pix[0] as f64));
                    data.push(F::of(pix[1] as f64));
                    data.push(F::of(pix[2] as f64));
                }
            }
        }
    }
    Tensor::new(vec![n, pd], data)
}

/// Linear projection of non-overlapping patches plus positional embedding.
pub fn patch_embed<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    image: &Raster,
) -> Result<Var> {
    let patches = g.constant(patch_matrix::<F>(cfg, image)?)?;
    let proj = linear(g, patches, vars.patch_w, vars.patch_b)?;
    g.add(proj, vars.pos_embed)
}

/// Contextual layers on patch tokens only.
pub fn contextual<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    mut x: Var,
) -> Result<Var> {
    for layer in &vars.ctx_layers {
        x = transformer_layer(g, x, layer, cfg.heads, None)?;
    }
    Ok(x)
}

/// Progressive stack for the original branch. Layer `l < inject_layers`
/// receives the previous layer's own patch features added in, mirroring the
/// mixed branch's injection with an identity plan.
pub fn progressive_original<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    ctx: Var,
) -> Result<(Var, Var, Vec<Var>)> {
    let s1 = cfg.s1;
    let n = cfg.n_patches();
    let mut group_state = vars.group_tokens1;
    let mut patches = ctx;
    let mut per_layer = Vec::with_capacity(cfg.progressive_layers);
    for (l, layer) in vars.prog_layers.iter().enumerate() {
        let p_in = if l < cfg.inject_layers {
            g.add(patches, patches)?
        } else {
            patches
        };
        let tokens = g.concat0(&[group_state, p_in])?;
        let out = transformer_layer(g, tokens, layer, cfg.heads, None)?;
        group_state = g.slice_rows(out, 0, s1)?;
        patches = g.slice_rows(out, s1, s1 + n)?;
        per_layer.push(patches);
    }
    Ok((group_state, patches, per_layer))
}

/// Grouping stages and heads shared by the original, mixed, and restored
/// branches: grouping 1 → post-1 layers → grouping 2 → post-2 layers →
/// attention map, segment embeddings, pooled embedding.
pub fn grouping_head<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    group_state: Var,
    patches: Var,
    mut mode: Assignment<'_>,
) -> Result<BranchOutput> {
    let s2 = cfg.s2;
    let s1 = cfg.s1;
    let gr1 = grouping_block(
        g,
        group_state,
        patches,
        &vars.grouping1,
        cfg.gumbel_temperature,
        mode.reborrow(),
    )?;

    let mut tokens = g.concat0(&[vars.group_tokens2, gr1.tokens])?;
    for layer in &vars.post1_layers {
        tokens = transformer_layer(g, tokens, layer, cfg.heads, None)?;
    }
    let g2_state = g.slice_rows(tokens, 0, s2)?;
    let t1 = g.slice_rows(tokens, s2, s2 + s1)?;
    let gr2 = grouping_block(
        g,
        g2_state,
        t1,
        &vars.grouping2,
        cfg.gumbel_temperature,
        mode.reborrow(),
    )?;

    let mut seg = gr2.tokens;
    for layer in &vars.post2_layers {
        seg = transformer_layer(g, seg, layer, cfg.heads, None)?;
    }

    // A = A1 ⊗ A2, rows renormalized to sum exactly to one.
    let a_raw = g.matmul(gr1.assign, gr2.assign)?;
    let row_sums = g.sum_axis(a_raw, 1)?;
    let attention = g.div_rows(a_raw, row_sums, 0.0)?;

    let seg_embed = {
        let e = mlp(g, seg, &vars.out_mlp)?;
        g.l2_normalize(e)?
    };
    let z = {
        let pooled = g.mean_axis(seg, 0)?;
        let pooled = g.reshape(pooled, vec![1, cfg.dim])?;
        let e = mlp(g, pooled, &vars.out_mlp)?;
        let e = g.l2_normalize(e)?;
        g.reshape(e, vec![cfg.joint_dim])?
    };

    Ok(BranchOutput {
        attention,
        seg_tokens: seg,
        seg_embed,
        z,
    })
}

/// Full original branch (the only branch executed at test time).
pub fn encode_image_original<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    image: &Raster,
    mut mode: Assignment<'_>,
) -> Result<OriginalTrace> {
    let embedded = patch_embed(g, vars, cfg, image)?;
    let ctx = contextual(g, vars, cfg, embedded)?;
    let (group_state, patches, stage1_patches) = progressive_original(g, vars, cfg, ctx)?;
    let out = grouping_head(g, vars, cfg, group_state, patches, mode.reborrow())?;
    Ok(OriginalTrace {
        embedded,
        ctx,
        stage1_patches,
        out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_raster(cfg: &ModelConfig, seed: u64) -> Raster {
        let mut rng = RngStream::new(seed, "img");
        let mut r = Raster::new(cfg.image_size, cfg.image_size);
        for v in r.data.iter_mut() {
            *v = rng.uniform() as f32;
        }
        r
    }

    fn init(cfg: &ModelConfig, seed: u64) -> EncoderParams<Tensor<f64>> {
        EncoderParams::init(cfg, 23, &mut RngStream::new(seed, "init"))
    }

    #[test]
    fn zero_image_zero_positions_gives_bias_rows() {
        let cfg = ModelConfig::tiny();
        let mut params = init(&cfg, 1);
        params.pos_embed = Tensor::zeros(vec![cfg.n_patches(), cfg.dim]);
        for v in params.patch_b.data_mut() {
            *v = 0.25;
        }
        let img = Raster::new(cfg.image_size, cfg.image_size);
        let mut g = Graph::<f64>::new();
        let vars = params.bind_frozen(&mut g).unwrap();
        let e = patch_embed(&mut g, &vars, &cfg, &img).unwrap();
        for &v in g.value(e).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_difference_is_local() {
        let cfg = ModelConfig::tiny();
        let params = init(&cfg, 2);
        let a = random_raster(&cfg, 3);
        let mut b = a.clone();
        // perturb one pixel inside patch (1,0) => patch index side*1+0 = 2
        b.set_pixel(cfg.patch_size + 2, 3, [0.9, 0.1, 0.2]);

        let mut g = Graph::<f64>::new();
        let vars = params.bind_frozen(&mut g).unwrap();
        let ea = patch_embed(&mut g, &vars, &cfg, &a).unwrap();
        let eb = patch_embed(&mut g, &vars, &cfg, &b).unwrap();
        let mut differing = Vec::new();
        for row in 0..cfg.n_patches() {
            let same = (0..cfg.dim)
                .all(|c| (g.value(ea).at(&[row, c]) - g.value(eb).at(&[row, c])).abs() < 1e-12);
            if !same {
                differing.push(row);
            }
        }
        assert_eq!(differing, vec![2]);
    }

    #[test]
    fn desk_patch_count_is_64() {
        let cfg = ModelConfig::desk();
        let params = EncoderParams::<Tensor<f32>>::init(&cfg, 23, &mut RngStream::new(4, "init"));
        let img = random_raster(&cfg, 5);
        let mut g = Graph::<f32>::new();
        let vars = params.bind_frozen(&mut g).unwrap();
        let e = patch_embed(&mut g, &vars, &cfg, &img).unwrap();
        assert_eq!(g.shape(e), &[64, cfg.dim]);
    }

    #[test]
    fn branch_output_contracts_hold() {
        let cfg = ModelConfig::tiny();
        let params = init(&cfg, 6);
        let img = random_raster(&cfg, 7);
        let mut g = Graph::<f64>::new();
        let vars = params.bind_frozen(&mut g).unwrap();
        let trace =
            encode_image_original(&mut g, &vars, &cfg, &img, Assignment::Deterministic).unwrap();
        let out = &trace.out;
        assert_eq!(g.shape(out.attention), &[cfg.n_patches(), cfg.s2]);
        for i in 0..cfg.n_patches() {
            let mut s = 0.0;
            for j in 0..cfg.s2 {
                let v = g.value(out.attention).at(&[i, j]);
                assert!(v >= 0.0);
                s += v;
            }
            assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
        }
        let z = g.value(out.z);
        assert_eq!(z.shape(), &[cfg.joint_dim]);
        let norm: f64 = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        for r in 0..cfg.s2 {
            let mut sq = 0.0;
            for c in 0..cfg.joint_dim {
                sq += g.value(out.seg_embed).at(&[r, c]).powi(2);
            }
            assert!((sq.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_given_seed_two_runs_bitwise_equal() {
        let cfg = ModelConfig::tiny();
        let params = init(&cfg, 8);
        let img = random_raster(&cfg, 9);
        let run = || {
            let mut g = Graph::<f64>::new();
            let vars = params.bind_frozen(&mut g).unwrap();
            let t = encode_image_original(&mut g, &vars, &cfg, &img, Assignment::Deterministic)
                .unwrap();
            (
                g.value(t.out.attention).data().to_vec(),
                g.value(t.out.z).data().to_vec(),
            )
        };
        let (a1, z1) = run();
        let (a2, z2) = run();
        assert_eq!(a1, a2);
        assert_eq!(z1, z2);
    }
}
