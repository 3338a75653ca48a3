//! Patch mixing across images, the ground-truth mixed mask, progressive
//! feature injection, and exact restoration.
//!
//! A mix plan draws an independent uniform permutation per patch position,
//! so every original patch lands in exactly one mixed image and restoration
//! is an exact inverse.

use crate::encoders::grouping::Assignment;
use crate::encoders::image::{
    contextual, encode_image_original, grouping_head, patch_embed, BranchOutput, OriginalTrace,
};
use crate::encoders::layers::transformer_layer;
use crate::encoders::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, RngStream, Scalar, Tensor, Var};
use crate::raster::Raster;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts every mixed-path entry (plan construction, group encoding).
/// Test-time purity asserts this never moves during evaluation.
static MIX_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn mix_event_count() -> u64 {
    MIX_EVENTS.load(Ordering::Relaxed)
}

fn record_mix_event() {
    MIX_EVENTS.fetch_add(1, Ordering::Relaxed);
}

/// Per-position source permutations defining a group of mixed images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixPlan {
    m: usize,
    n: usize,
    group_offset: usize,
    /// `source[mi * n + i]` = local index of the image supplying patch `i`
    /// of mixed image `mi`; each position's column is a permutation.
    source: Vec<u16>,
}

pub const PLAN_MAGIC: &[u8; 4] = b"MXPL";
pub const PLAN_VERSION: u32 = 1;

impl MixPlan {
    /// Independent uniform permutation per position (Fisher–Yates).
    pub fn generate(rng: &mut RngStream, m: usize, n: usize, group_offset: usize) -> Self {
        record_mix_event();
        let mut source = vec![0u16; m * n];
        for i in 0..n {
            let perm = rng.permutation(m);
            for (mi, &s) in perm.iter().enumerate() {
                source[mi * n + i] = s as u16;
            }
        }
        MixPlan { m, n, group_offset, source }
    }

    /// The degenerate plan: every patch stays in its own image.
    pub fn identity(m: usize, n: usize, group_offset: usize) -> Self {
        let mut source = vec![0u16; m * n];
        for mi in 0..m {
            for i in 0..n {
                source[mi * n + i] = mi as u16;
            }
        }
        MixPlan { m, n, group_offset, source }
    }

    pub fn group_size(&self) -> usize {
        self.m
    }

    pub fn positions(&self) -> usize {
        self.n
    }

    pub fn group_offset(&self) -> usize {
        self.group_offset
    }

    /// Local source image of patch `i` in mixed image `mi`.
    pub fn source(&self, mi: usize, i: usize) -> usize {
        self.source[mi * self.n + i] as usize
    }

    /// Gather indices for [`apply_mix`] (`out[mi][i] = in[src][i]`).
    pub fn gather_indices(&self) -> Vec<usize> {
        self.source.iter().map(|&s| s as usize).collect()
    }

    /// Gather indices for [`restore`]: the positionwise inverse permutation.
    pub fn restore_indices(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.m * self.n];
        for mi in 0..self.m {
            for i in 0..self.n {
                let j = self.source[mi * self.n + i] as usize;
                inv[j * self.n + i] = mi;
            }
        }
        inv
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PLAN_MAGIC)?;
        w.write_all(&PLAN_VERSION.to_le_bytes())?;
        w.write_all(&(self.m as u32).to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.group_offset as u32).to_le_bytes())?;
        for &s in &self.source {
            w.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl Read, name: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|_| {
                Error::format(name, offset, format!("truncated while reading {what}"))
            })?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        take(&mut magic, "magic")?;
        if &magic != PLAN_MAGIC {
            return Err(Error::format(name, 0, format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        take(&mut u32buf, "version")?;
        let version = u32::from_le_bytes(u32buf);
        if version != PLAN_VERSION {
            return Err(Error::format(name, 4, format!("unsupported version {version}")));
        }
        take(&mut u32buf, "group size")?;
        let m = u32::from_le_bytes(u32buf) as usize;
        take(&mut u32buf, "position count")?;
        let n = u32::from_le_bytes(u32buf) as usize;
        take(&mut u32buf, "group offset")?;
        let group_offset = u32::from_le_bytes(u32buf) as usize;
        let mut source = vec![0u16; m * n];
        for (idx, s) in source.iter_mut().enumerate() {
            let mut b = [0u8; 2];
            take(&mut b, &format!("source entry {idx}"))?;
            *s = u16::from_le_bytes(b);
        }
        let plan = MixPlan { m, n, group_offset, source };
        plan.check_invariants(name)?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f, &path.display().to_string())
    }

    /// Every position's source column must be a permutation of 0..M.
    fn check_invariants(&self, name: &str) -> Result<()> {
        for i in 0..self.n {
            let mut seen = vec![false; self.m];
            for mi in 0..self.m {
                let s = self.source[mi * self.n + i] as usize;
                if s >= self.m || seen[s] {
                    return Err(Error::format(
                        name,
                        0,
                        format!("position {i} is not a permutation"),
                    ));
                }
                seen[s] = true;
            }
        }
        Ok(())
    }
}

/// One-hot ground-truth mask `[M, N, B]` for a mixed group.
pub fn build_mixed_mask<F: Scalar>(plan: &MixPlan, batch: usize) -> Result<Tensor<F>> {
    let (m, n) = (plan.m, plan.n);
    if plan.group_offset + m > batch {
        return Err(Error::Config(format!(
            "group offset {} + M {} exceeds batch size {batch}",
            plan.group_offset, m
        )));
    }
    let mut mask = Tensor::zeros(vec![m, n, batch]);
    {
        let data = mask.data_mut();
        for mi in 0..m {
            for i in 0..n {
                let j = plan.group_offset + plan.source[mi * n + i] as usize;
                data[(mi * n + i) * batch + j] = F::one();
            }
        }
    }
    Ok(mask)
}

/// Route contextualized features into mixed images: `out[mi][i] = in[src][i]`.
pub fn apply_mix<F: Scalar>(g: &mut Graph<F>, features: Var, plan: &MixPlan) -> Result<Var> {
    check_features("apply_mix", g.shape(features), plan)?;
    g.gather_outer(features, &plan.gather_indices())
}

/// Exact inverse of [`apply_mix`] under the same plan.
pub fn restore<F: Scalar>(g: &mut Graph<F>, features: Var, plan: &MixPlan) -> Result<Var> {
    check_features("restore", g.shape(features), plan)?;
    g.gather_outer(features, &plan.restore_indices())
}

fn check_features(op: &'static str, shape: &[usize], plan: &MixPlan) -> Result<()> {
    if shape.len() != 3 || shape[0] != plan.m || shape[1] != plan.n {
        return Err(Error::shape(
            op,
            format!("features {:?} vs plan M={} N={}", shape, plan.m, plan.n),
        ));
    }
    Ok(())
}

/// Add the mixed previous-layer original features to the mixed tokens
/// (applied before each progressive layer).
pub fn progressive_inject<F: Scalar>(
    g: &mut Graph<F>,
    mixed_tokens: Var,
    original_prev: Var,
    plan: &MixPlan,
) -> Result<Var> {
    let mixed = apply_mix(g, original_prev, plan)?;
    g.add(mixed_tokens, mixed)
}

/// All three branches for one mix group, sharing one parameter binding.
pub struct GroupEncoding {
    /// Original-branch traces, one per image, in batch order.
    pub original: Vec<OriginalTrace>,
    /// Mixed-branch outputs, one per mixed image.
    pub mixed: Vec<BranchOutput>,
    /// Restored-branch outputs, back in original image order.
    pub restored: Vec<BranchOutput>,
}

/// Encode one group of M images through the original, mixed, and restored
/// branches. The mixed branch mixes contextualized tokens (or raw embeddings
/// when contextual mixing is ablated off), runs the progressive stack with
/// per-layer injection of mixed original features, then forks: the mixed
/// path groups the mixed tokens while the restored path groups the
/// inverse-permuted tokens, reusing the mixed branch's group-token state.
pub fn encode_group<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    images: &[&Raster],
    plan: &MixPlan,
    mut mode: Assignment<'_>,
) -> Result<GroupEncoding> {
    record_mix_event();
    let m = plan.group_size();
    if images.len() != m || cfg.group_size != m {
        return Err(Error::Config(format!(
            "group of {} images vs plan M={} (config M={})",
            images.len(),
            m,
            cfg.group_size
        )));
    }
    let n = cfg.n_patches();
    let s1 = cfg.s1;

    let mut original = Vec::with_capacity(m);
    for image in images {
        original.push(encode_image_original(g, vars, cfg, image, mode.reborrow())?);
    }

    // Contextual mixing: mix the contextualized tokens. With CM off the raw
    // embeddings are mixed first and the contextual layers run on the mix.
    let mut mixed_patches = if cfg.cm_enabled {
        let ctx: Vec<Var> = original.iter().map(|t| t.ctx).collect();
        let stacked = g.stack0(&ctx)?;
        apply_mix(g, stacked, plan)?
    } else {
        let emb: Vec<Var> = original.iter().map(|t| t.embedded).collect();
        let stacked = g.stack0(&emb)?;
        let mixed_raw = apply_mix(g, stacked, plan)?;
        let mut per_image = Vec::with_capacity(m);
        for mi in 0..m {
            let x = g.index0(mixed_raw, mi)?;
            per_image.push(contextual(g, vars, cfg, x)?);
        }
        g.stack0(&per_image)?
    };

    let mut group_state: Vec<Var> = vec![vars.group_tokens1; m];
    for (l, layer) in vars.prog_layers.iter().enumerate() {
        let patches_in = if l < cfg.inject_layers {
            let sources: Vec<Var> = if l == 0 {
                original.iter().map(|t| t.ctx).collect()
            } else {
                original.iter().map(|t| t.stage1_patches[l - 1]).collect()
            };
            let stacked = g.stack0(&sources)?;
            progressive_inject(g, mixed_patches, stacked, plan)?
        } else {
            mixed_patches
        };
        let mut outs = Vec::with_capacity(m);
        for (mi, state) in group_state.iter_mut().enumerate() {
            let p = g.index0(patches_in, mi)?;
            let tokens = g.concat0(&[*state, p])?;
            let out = transformer_layer(g, tokens, layer, cfg.heads, None)?;
            *state = g.slice_rows(out, 0, s1)?;
            outs.push(g.slice_rows(out, s1, s1 + n)?);
        }
        mixed_patches = g.stack0(&outs)?;
    }

    // Fork: restoration inverts the mixing on the patch tokens; each restored
    // image reuses the group-token state of the like-indexed mixed image.
    let restored_patches = restore(g, mixed_patches, plan)?;

    let mut mixed = Vec::with_capacity(m);
    for (mi, state) in group_state.iter().enumerate() {
        let p = g.index0(mixed_patches, mi)?;
        mixed.push(grouping_head(g, vars, cfg, *state, p, mode.reborrow())?);
    }
    let mut restored = Vec::with_capacity(m);
    for (j, state) in group_state.iter().enumerate() {
        let p = g.index0(restored_patches, j)?;
        restored.push(grouping_head(g, vars, cfg, *state, p, mode.reborrow())?);
    }

    Ok(GroupEncoding { original, mixed, restored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn m1_plan_is_identity() {
        let mut rng = RngStream::new(1, "mix");
        let plan = MixPlan::generate(&mut rng, 1, 8, 0);
        assert_eq!(plan, MixPlan::identity(1, 8, 0));
        for i in 0..8 {
            assert_eq!(plan.source(0, i), 0);
        }
    }

    #[test]
    fn columns_are_permutations_by_construction() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, "mix");
            let plan = MixPlan::generate(&mut rng, 4, 16, 0);
            plan.check_invariants("test").unwrap();
        }
    }

    #[test]
    fn identity_plan_apply_mix_is_identity() {
        let plan = MixPlan::identity(3, 4, 0);
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(vec![3, 4, 2], |i| i as f64 * 0.5);
        let xv = g.constant(x.clone()).unwrap();
        let y = apply_mix(&mut g, xv, &plan).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn apply_mix_preserves_position_multisets() {
        let mut rng = RngStream::new(3, "mix");
        let plan = MixPlan::generate(&mut rng, 4, 6, 0);
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(vec![4, 6, 1], |i| i as f64);
        let xv = g.constant(x.clone()).unwrap();
        let y = apply_mix(&mut g, xv, &plan).unwrap();
        for i in 0..6 {
            let mut orig: Vec<f64> = (0..4).map(|mi| x.at(&[mi, i, 0])).collect();
            let mut mixed: Vec<f64> = (0..4).map(|mi| g.value(y).at(&[mi, i, 0])).collect();
            orig.sort_by(f64::total_cmp);
            mixed.sort_by(f64::total_cmp);
            assert_eq!(orig, mixed, "position {i}");
        }
    }

    #[test]
    fn gradient_of_sum_is_all_ones() {
        // every patch is consumed exactly once
        let mut rng = RngStream::new(4, "mix");
        let plan = MixPlan::generate(&mut rng, 4, 5, 0);
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_fn(vec![4, 5, 3], |i| (i as f64).sin()), true)
            .unwrap();
        let y = apply_mix(&mut g, x, &plan).unwrap();
        let s = g.mean_all(y).unwrap();
        let s = g.scale(s, 60.0).unwrap(); // undo the mean: now a plain sum
        g.backward(s).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_invariants_and_consumption() {
        let mut rng = RngStream::new(5, "mix");
        let plan = MixPlan::generate(&mut rng, 4, 8, 4);
        let mask = build_mixed_mask::<f64>(&plan, 12).unwrap();
        assert_eq!(mask.shape(), &[4, 8, 12]);
        for mi in 0..4 {
            for i in 0..8 {
                let row: Vec<f64> = (0..12).map(|b| mask.at(&[mi, i, b])).collect();
                assert_eq!(row.iter().sum::<f64>(), 1.0);
                let hot = row.iter().position(|&v| v == 1.0).unwrap();
                assert_eq!(hot, 4 + plan.source(mi, i));
            }
        }
        // each (position, in-group source) pair consumed exactly once
        for i in 0..8 {
            for j in 0..4 {
                let total: f64 = (0..4).map(|mi| mask.at(&[mi, i, 4 + j])).sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    #[test]
    fn mask_offset_out_of_range_is_rejected() {
        let plan = MixPlan::identity(4, 4, 2);
        assert!(build_mixed_mask::<f64>(&plan, 4).is_err());
        assert!(build_mixed_mask::<f64>(&plan, 6).is_ok());
    }

    #[test]
    fn m1_mask_is_own_index() {
        let plan = MixPlan::identity(1, 4, 3);
        let mask = build_mixed_mask::<f64>(&plan, 6).unwrap();
        for i in 0..4 {
            for b in 0..6 {
                assert_eq!(mask.at(&[0, i, b]), if b == 3 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn progressive_inject_zero_and_doubling() {
        let plan = MixPlan::identity(2, 3, 0);
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(vec![2, 3, 2], |i| i as f64 + 1.0);
        let xv = g.constant(x.clone()).unwrap();
        let zeros = g.constant(Tensor::zeros(vec![2, 3, 2])).unwrap();
        let same = progressive_inject(&mut g, xv, zeros, &plan).unwrap();
        assert_eq!(g.value(same).data(), x.data());
        let doubled = progressive_inject(&mut g, xv, xv, &plan).unwrap();
        for (a, b) in g.value(doubled).data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn injection_path_carries_gradient_to_original_tokens() {
        let mut rng = RngStream::new(6, "mix");
        let plan = MixPlan::generate(&mut rng, 2, 4, 0);
        let mut g = Graph::<f64>::new();
        let mixed = g.constant(Tensor::zeros(vec![2, 4, 2])).unwrap();
        let orig = g
            .leaf(Tensor::from_fn(vec![2, 4, 2], |i| (i as f64) * 0.1), true)
            .unwrap();
        let y = progressive_inject(&mut g, mixed, orig, &plan).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.mean_all(sq).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(orig).unwrap();
        assert!(grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn plan_file_round_trip_and_corruption() {
        let mut rng = RngStream::new(7, "mix");
        let plan = MixPlan::generate(&mut rng, 4, 16, 8);
        let mut bytes = Vec::new();
        plan.write_to(&mut bytes).unwrap();
        let back = MixPlan::read_from(&mut bytes.as_slice(), "mem").unwrap();
        assert_eq!(plan, back);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'Z';
        let err = MixPlan::read_from(&mut corrupt.as_slice(), "mem").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let truncated = &bytes[..bytes.len() - 3];
        let err = MixPlan::read_from(&mut &truncated[..], "mem").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn restore_and_mix_are_mutual_inverses(
            seed in any::<u64>(),
            m_pick in 0usize..4,
            n_pick in 0usize..3,
        ) {
            let m = [1usize, 2, 4, 8][m_pick];
            let n = [4usize, 16, 64][n_pick];
            let mut rng = RngStream::new(seed, "mix-prop");
            let plan = MixPlan::generate(&mut rng, m, n, 0);

            let x = Tensor::<f32>::from_fn(vec![m, n, 2], |i| (i as f32).sin());
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone()).unwrap();
            let mixed = apply_mix(&mut g, xv, &plan).unwrap();
            let back = restore(&mut g, mixed, &plan).unwrap();
            prop_assert_eq!(g.value(back).data(), x.data());

            let y = Tensor::<f32>::from_fn(vec![m, n, 2], |i| (i as f32).cos());
            let yv = g.constant(y.clone()).unwrap();
            let restored = restore(&mut g, yv, &plan).unwrap();
            let forward = apply_mix(&mut g, restored, &plan).unwrap();
            prop_assert_eq!(g.value(forward).data(), y.data());
        }
    }
}
