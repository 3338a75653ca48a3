//! Mask prediction and every training loss term.
//!
//! The mixed branch gets a patch-level segmentation loss against the known
//! mixed mask; the restored and original branches get paired and multi-label
//! contrastive losses against the batch text embeddings. One learnable
//! temperature is shared by every similarity.

use crate::encoders::config::{TAU_MAX, TAU_MIN};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Epsilon used inside every `log` of the loss stack.
pub const LOG_EPS: f64 = 1e-8;

/// Per-term weights (all 1 by default; ablations zero individual terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub re: f64,
    pub ori: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, re: 1.0, ori: 1.0 }
    }
}

/// Every scalar loss node of one training step.
pub struct LossBundle {
    pub seg: Var,
    pub re_pair: Var,
    pub re_multilabel: Var,
    pub ori_pair: Var,
    pub ori_multilabel: Var,
    pub total: Var,
}

/// Extracted loss values for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub seg: f64,
    pub re_pair: f64,
    pub re_multilabel: f64,
    pub ori_pair: f64,
    pub ori_multilabel: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values<F: Scalar>(&self, g: &Graph<F>) -> LossValues {
        LossValues {
            seg: g.value(self.seg).item().as_f64(),
            re_pair: g.value(self.re_pair).item().as_f64(),
            re_multilabel: g.value(self.re_multilabel).item().as_f64(),
            ori_pair: g.value(self.ori_pair).item().as_f64(),
            ori_multilabel: g.value(self.ori_multilabel).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [
            self.seg,
            self.re_pair,
            self.re_multilabel,
            self.ori_pair,
            self.ori_multilabel,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// τ and 1/τ nodes from the stored log τ, clamped into the legal range
/// (with a warning if the stored value had escaped it).
pub fn temperature<F: Scalar>(g: &mut Graph<F>, log_tau: Var) -> Result<(Var, Var)> {
    let tau_raw = g.exp(log_tau)?;
    let v = g.value(tau_raw).item().as_f64();
    if !(TAU_MIN..=TAU_MAX).contains(&v) {
        log::warn!("temperature {v:.4} outside [{TAU_MIN}, {TAU_MAX}]; clamped");
    }
    let tau = g.clamp(tau_raw, TAU_MIN, TAU_MAX)?;
    let inv = g.recip(tau)?;
    Ok((tau, inv))
}

/// Similarity of mixed-image segment embeddings to every batch text:
/// softmax over the batch-text axis of cosine/τ. Inputs must be unit rows.
/// `seg_embed: [M, s2, D]`, `text_emb: [B, D]` → `[M, s2, B]`.
pub fn similarity<F: Scalar>(
    g: &mut Graph<F>,
    seg_embed: Var,
    text_emb: Var,
    inv_tau: Var,
) -> Result<Var> {
    let tt = g.transpose2(text_emb)?; // [D, B]
    let sims = g.matmul(seg_embed, tt)?; // [M, s2, B]
    let scaled = g.scale_by(sims, inv_tau)?;
    g.softmax(scaled, 2)
}

/// Predicted mask `M_p = A ⊗ S`: `[M, N, s2] × [M, s2, B] → [M, N, B]`.
pub fn predict_masks<F: Scalar>(g: &mut Graph<F>, attention: Var, sim: Var) -> Result<Var> {
    g.matmul(attention, sim)
}

/// Mean over patches of `-log M_p` at the true source index.
pub fn seg_loss<F: Scalar>(g: &mut Graph<F>, predicted: Var, mask: Var) -> Result<Var> {
    let axis = g.shape(predicted).len() - 1;
    g.cross_entropy(predicted, mask, axis)
}

/// Constant one-hot diagonal selector `[B, B]` (or its K-block variant).
fn diag_mask<F: Scalar>(g: &mut Graph<F>, b: usize, blocks: usize) -> Result<Var> {
    let t = Tensor::from_fn(vec![b, blocks * b], |flat| {
        let (i, j) = (flat / (blocks * b), flat % (blocks * b));
        if j % b == i {
            F::one()
        } else {
            F::zero()
        }
    });
    g.constant(t)
}

/// Mean over rows of `-log(Σ_cols mask ⊙ softmax(logits))`.
fn masked_info_nce<F: Scalar>(g: &mut Graph<F>, logits: Var, mask: Var) -> Result<Var> {
    let p = g.softmax(logits, 1)?;
    let picked = g.mul(p, mask)?;
    let row = g.sum_axis(picked, 1)?;
    let lg = g.log_eps(row, LOG_EPS)?;
    let mean = g.mean_all(lg)?;
    g.neg(mean)
}

/// Symmetric InfoNCE between unit-row embeddings (image↔text):
/// mean over the batch of `-log softmax` of the diagonal, both directions.
pub fn contrastive_pair_loss<F: Scalar>(
    g: &mut Graph<F>,
    z_img: Var,
    z_txt: Var,
    inv_tau: Var,
) -> Result<Var> {
    let b = g.shape(z_img)[0];
    if b < 2 {
        return Err(Error::Numerical(format!(
            "contrastive_pair_loss needs a batch of at least 2, got {b}"
        )));
    }
    if g.shape(z_img) != g.shape(z_txt) {
        return Err(Error::shape(
            "contrastive_pair_loss",
            format!("{:?} vs {:?}", g.shape(z_img), g.shape(z_txt)),
        ));
    }
    let tt = g.transpose2(z_txt)?;
    let sims = g.matmul(z_img, tt)?; // [B, B], entry (i, j) = z_i^I · z_j^T
    let logits = g.scale_by(sims, inv_tau)?;
    let mask = diag_mask::<F>(g, b, 1)?;
    let i2t = masked_info_nce(g, logits, mask)?;
    let logits_t2i = g.transpose2(logits)?;
    let t2i = masked_info_nce(g, logits_t2i, mask)?;
    g.add(i2t, t2i)
}

/// Multi-label contrast against K prompt sets.
///
/// Image→labels sums the K positives inside both the numerator and the
/// (K·B)-wide denominator; labels→image averages the per-label InfoNCE over
/// K. With K=1 both reduce exactly to the paired loss.
pub fn multilabel_contrastive_loss<F: Scalar>(
    g: &mut Graph<F>,
    z_img: Var,
    z_prompts: &[Var],
    inv_tau: Var,
) -> Result<Var> {
    let k = z_prompts.len();
    if k == 0 {
        return Err(Error::Numerical(
            "multilabel_contrastive_loss needs at least one label set".into(),
        ));
    }
    let b = g.shape(z_img)[0];
    if b < 2 {
        return Err(Error::Numerical(format!(
            "multilabel_contrastive_loss needs a batch of at least 2, got {b}"
        )));
    }

    // image → labels: one [B, K·B] softmax per image row
    let mut blocks = Vec::with_capacity(k);
    for &zt in z_prompts {
        if g.shape(zt) != g.shape(z_img) {
            return Err(Error::shape(
                "multilabel_contrastive_loss",
                format!("{:?} vs {:?}", g.shape(zt), g.shape(z_img)),
            ));
        }
        let tt = g.transpose2(zt)?;
        let sims = g.matmul(z_img, tt)?;
        blocks.push(g.scale_by(sims, inv_tau)?);
    }
    let logits = if k == 1 { blocks[0] } else { g.concat_cols(&blocks)? };
    let mask = diag_mask::<F>(g, b, k)?;
    let i2l = masked_info_nce(g, logits, mask)?;

    // labels → image: per-label InfoNCE averaged over K
    let diag = diag_mask::<F>(g, b, 1)?;
    let mut acc: Option<Var> = None;
    for &zt in z_prompts {
        let it = g.transpose2(z_img)?;
        let sims = g.matmul(zt, it)?; // (i, j) = z_i^{T_k} · z_j^I
        let logits = g.scale_by(sims, inv_tau)?;
        let term = masked_info_nce(g, logits, diag)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let l2i = g.scale(acc.expect("k >= 1"), 1.0 / k as f64)?;

    g.add(i2l, l2i)
}

/// Per-group inputs to the segmentation loss.
pub struct SegGroupInputs {
    /// Mixed-branch attention maps `[M, N, s2]`.
    pub attention: Var,
    /// Mixed-branch segment embeddings `[M, s2, D]`, unit rows.
    pub seg_embed: Var,
    /// Ground-truth one-hot mask `[M, N, B]`.
    pub mask: Var,
}

/// Assemble every loss term for one training step.
///
/// `z_restored`/`z_original` are `[B, D]` stacks in batch order; `z_texts`
/// holds the caption embeddings and `z_prompts` the K prompt-label stacks.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    groups: &[SegGroupInputs],
    z_restored: Var,
    z_original: Var,
    z_texts: Var,
    z_prompts: &[Var],
    log_tau: Var,
    weights: LossWeights,
) -> Result<LossBundle> {
    if groups.is_empty() {
        return Err(Error::Numerical("total_loss: no mix groups".into()));
    }
    let (_tau, inv_tau) = temperature(g, log_tau)?;

    // L_seg averaged over every mixed image and patch of the batch.
    let mut seg_acc: Option<Var> = None;
    for group in groups {
        let s = similarity(g, group.seg_embed, z_texts, inv_tau)?;
        let mp = predict_masks(g, group.attention, s)?;
        let l = seg_loss(g, mp, group.mask)?;
        seg_acc = Some(match seg_acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let seg = g.scale(seg_acc.expect("non-empty"), 1.0 / groups.len() as f64)?;

    let re_pair = contrastive_pair_loss(g, z_restored, z_texts, inv_tau)?;
    let re_multilabel = multilabel_contrastive_loss(g, z_restored, z_prompts, inv_tau)?;
    let ori_pair = contrastive_pair_loss(g, z_original, z_texts, inv_tau)?;
    let ori_multilabel = multilabel_contrastive_loss(g, z_original, z_prompts, inv_tau)?;

    let ws = g.scale(seg, weights.seg)?;
    let wre_p = g.scale(re_pair, weights.re)?;
    let wre_m = g.scale(re_multilabel, weights.re)?;
    let wori_p = g.scale(ori_pair, weights.ori)?;
    let wori_m = g.scale(ori_multilabel, weights.ori)?;
    let mut total = g.add(ws, wre_p)?;
    total = g.add(total, wre_m)?;
    total = g.add(total, wori_p)?;
    total = g.add(total, wori_m)?;

    Ok(LossBundle {
        seg,
        re_pair,
        re_multilabel,
        ori_pair,
        ori_multilabel,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn unit_rows(rng: &mut RngStream, b: usize, d: usize) -> Tensor<f64> {
        let mut t = Tensor::from_fn(vec![b, d], |_| rng.uniform_range(-1.0, 1.0));
        for r in 0..b {
            let row = &mut t.data_mut()[r * d..(r + 1) * d];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        t
    }

    fn inv_tau_var(g: &mut Graph<f64>, tau: f64) -> Var {
        let lt = g.constant(Tensor::scalar(tau.ln())).unwrap();
        temperature(g, lt).unwrap().1
    }

    #[test]
    fn identical_embeddings_give_two_ln_b() {
        for b in [2usize, 4, 7] {
            let mut g = Graph::<f64>::new();
            let row = unit_rows(&mut RngStream::new(b as u64, "z"), 1, 6);
            let z = Tensor::from_fn(vec![b, 6], |i| row.data()[i % 6]);
            let zi = g.constant(z.clone()).unwrap();
            let zt = g.constant(z).unwrap();
            let inv = inv_tau_var(&mut g, 0.07);
            let l = contrastive_pair_loss(&mut g, zi, zt, inv).unwrap();
            let want = 2.0 * (b as f64).ln();
            assert!(
                (g.value(l).item() - want).abs() < 1e-6,
                "B={b}: {} vs {want}",
                g.value(l).item()
            );
        }
    }

    #[test]
    fn orthonormal_rows_at_cold_temperature_vanish() {
        let mut g = Graph::<f64>::new();
        let b = 4;
        let z = Tensor::from_fn(vec![b, b], |i| if i / b == i % b { 1.0 } else { 0.0 });
        let zi = g.constant(z.clone()).unwrap();
        let zt = g.constant(z).unwrap();
        let inv = inv_tau_var(&mut g, 0.01);
        let l = contrastive_pair_loss(&mut g, zi, zt, inv).unwrap();
        assert!(g.value(l).item() < 1e-3, "{}", g.value(l).item());
        assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn pair_loss_matches_direct_evaluation_b2() {
        let mut rng = RngStream::new(17, "pair");
        let zi = unit_rows(&mut rng, 2, 4);
        let zt = unit_rows(&mut rng, 2, 4);
        let tau = 0.2;

        // straight-line oracle
        let dot = |a: &Tensor<f64>, i: usize, b: &Tensor<f64>, j: usize| -> f64 {
            (0..4).map(|c| a.at(&[i, c]) * b.at(&[j, c])).sum()
        };
        let mut want = 0.0;
        for i in 0..2 {
            let num = (dot(&zi, i, &zt, i) / tau).exp();
            let den: f64 = (0..2).map(|j| (dot(&zi, i, &zt, j) / tau).exp()).sum();
            want -= (num / den).ln() / 2.0;
            let num = (dot(&zt, i, &zi, i) / tau).exp();
            let den: f64 = (0..2).map(|j| (dot(&zt, i, &zi, j) / tau).exp()).sum();
            want -= (num / den).ln() / 2.0;
        }

        let mut g = Graph::<f64>::new();
        let a = g.constant(zi).unwrap();
        let b = g.constant(zt).unwrap();
        let inv = inv_tau_var(&mut g, tau);
        let l = contrastive_pair_loss(&mut g, a, b, inv).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-6);
    }

    #[test]
    fn batch_below_two_is_an_error() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(unit_rows(&mut RngStream::new(1, "z"), 1, 4)).unwrap();
        let inv = inv_tau_var(&mut g, 0.1);
        assert!(contrastive_pair_loss(&mut g, z, z, inv).is_err());
    }

    #[test]
    fn k1_multilabel_equals_pair_loss() {
        let mut rng = RngStream::new(19, "ml");
        let zi = unit_rows(&mut rng, 3, 5);
        let zt = unit_rows(&mut rng, 3, 5);
        let mut g = Graph::<f64>::new();
        let a = g.constant(zi).unwrap();
        let b = g.constant(zt).unwrap();
        let inv = inv_tau_var(&mut g, 0.07);
        let pair = contrastive_pair_loss(&mut g, a, b, inv).unwrap();
        let multi = multilabel_contrastive_loss(&mut g, a, &[b], inv).unwrap();
        assert!((g.value(pair).item() - g.value(multi).item()).abs() < 1e-9);
    }

    #[test]
    fn all_identical_embeddings_multilabel_terms_are_ln_b() {
        let b = 5;
        let mut g = Graph::<f64>::new();
        let row = unit_rows(&mut RngStream::new(23, "z"), 1, 4);
        let z = Tensor::from_fn(vec![b, 4], |i| row.data()[i % 4]);
        let zv = g.constant(z.clone()).unwrap();
        let p1 = g.constant(z.clone()).unwrap();
        let p2 = g.constant(z).unwrap();
        let inv = inv_tau_var(&mut g, 0.07);
        let l = multilabel_contrastive_loss(&mut g, zv, &[p1, p2], inv).unwrap();
        // each direction contributes ln B when everything is identical
        assert!((g.value(l).item() - 2.0 * (b as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn multilabel_matches_direct_evaluation_k2_b2() {
        let mut rng = RngStream::new(29, "ml2");
        let zi = unit_rows(&mut rng, 2, 3);
        let t1 = unit_rows(&mut rng, 2, 3);
        let t2 = unit_rows(&mut rng, 2, 3);
        let tau = 0.31;
        let prompts = [&t1, &t2];

        let dot = |a: &Tensor<f64>, i: usize, b: &Tensor<f64>, j: usize| -> f64 {
            (0..3).map(|c| a.at(&[i, c]) * b.at(&[j, c])).sum()
        };
        // Eq. image→labels: positives summed over K, denominator over K and B
        let mut i2l = 0.0;
        for i in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            for t in prompts {
                num += (dot(&zi, i, t, i) / tau).exp();
                for j in 0..2 {
                    den += (dot(&zi, i, t, j) / tau).exp();
                }
            }
            i2l -= (num / den).ln() / 2.0;
        }
        // Eq. labels→image: mean over K and B
        let mut l2i = 0.0;
        for t in prompts {
            for i in 0..2 {
                let num = (dot(t, i, &zi, i) / tau).exp();
                let den: f64 = (0..2).map(|j| (dot(t, i, &zi, j) / tau).exp()).sum();
                l2i -= (num / den).ln() / 4.0;
            }
        }
        let want = i2l + l2i;

        let mut g = Graph::<f64>::new();
        let a = g.constant(zi).unwrap();
        let p1 = g.constant(t1).unwrap();
        let p2 = g.constant(t2).unwrap();
        let inv = inv_tau_var(&mut g, tau);
        let l = multilabel_contrastive_loss(&mut g, a, &[p1, p2], inv).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-6, "{} vs {want}", g.value(l).item());
    }

    #[test]
    fn duplicated_label_set_changes_nothing() {
        let mut rng = RngStream::new(31, "dup");
        let zi = unit_rows(&mut rng, 3, 4);
        let t1 = unit_rows(&mut rng, 3, 4);
        let t2 = unit_rows(&mut rng, 3, 4);
        let mut g = Graph::<f64>::new();
        let a = g.constant(zi).unwrap();
        let p1 = g.constant(t1).unwrap();
        let p2 = g.constant(t2).unwrap();
        let inv = inv_tau_var(&mut g, 0.09);
        let once = multilabel_contrastive_loss(&mut g, a, &[p1, p2], inv).unwrap();
        let twice = multilabel_contrastive_loss(&mut g, a, &[p1, p2, p1, p2], inv).unwrap();
        assert!((g.value(once).item() - g.value(twice).item()).abs() < 1e-6);
    }

    #[test]
    fn pair_loss_invariant_under_joint_rotation() {
        let mut rng = RngStream::new(37, "rot");
        let d = 4;
        let zi = unit_rows(&mut rng, 3, d);
        let zt = unit_rows(&mut rng, 3, d);

        // random orthogonal matrix via Gram-Schmidt
        let mut q = vec![vec![0.0f64; d]; d];
        for row in q.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.uniform_range(-1.0, 1.0);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let proj: f64 = (0..d).map(|c| q[i][c] * q[j][c]).sum();
                for c in 0..d {
                    q[i][c] -= proj * q[j][c];
                }
            }
            let n: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in q[i].iter_mut() {
                *v /= n;
            }
        }
        let rotate = |t: &Tensor<f64>| {
            Tensor::from_fn(vec![3, d], |flat| {
                let (r, c) = (flat / d, flat % d);
                (0..d).map(|k| t.at(&[r, k]) * q[c][k]).sum()
            })
        };
        let zi_r = rotate(&zi);
        let zt_r = rotate(&zt);

        let mut g = Graph::<f64>::new();
        let inv = inv_tau_var(&mut g, 0.07);
        let a = g.constant(zi).unwrap();
        let b = g.constant(zt).unwrap();
        let ar = g.constant(zi_r).unwrap();
        let br = g.constant(zt_r).unwrap();
        let l = contrastive_pair_loss(&mut g, a, b, inv).unwrap();
        let lr = contrastive_pair_loss(&mut g, ar, br, inv).unwrap();
        assert!((g.value(l).item() - g.value(lr).item()).abs() < 1e-6);
    }

    #[test]
    fn similarity_uniform_when_all_texts_identical() {
        let mut g = Graph::<f64>::new();
        let b = 4;
        let row = unit_rows(&mut RngStream::new(41, "t"), 1, 3);
        let texts = Tensor::from_fn(vec![b, 3], |i| row.data()[i % 3]);
        let segs = unit_rows(&mut RngStream::new(43, "s"), 2, 3)
            .reshaped(vec![1, 2, 3])
            .unwrap();
        let sv = g.constant(segs).unwrap();
        let tv = g.constant(texts).unwrap();
        let inv = inv_tau_var(&mut g, 0.07);
        let s = similarity(&mut g, sv, tv, inv).unwrap();
        for i in 0..2 {
            for j in 0..b {
                assert!((g.value(s).at(&[0, i, j]) - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn similarity_concentrates_on_orthogonal_match_at_cold_tau() {
        let mut g = Graph::<f64>::new();
        // text 0 orthogonal to text 1; the segment equals text 0
        let texts = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let segs = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let sv = g.constant(segs).unwrap();
        let tv = g.constant(texts).unwrap();
        let inv = inv_tau_var(&mut g, 0.01);
        let s = similarity(&mut g, sv, tv, inv).unwrap();
        assert!(g.value(s).at(&[0, 0, 0]) > 1.0 - 1e-9);
    }

    #[test]
    fn similarity_matches_direct_evaluation_b2() {
        let mut rng = RngStream::new(47, "sim");
        let segs = unit_rows(&mut rng, 3, 4);
        let texts = unit_rows(&mut rng, 2, 4);
        let tau = 0.5;
        let mut g = Graph::<f64>::new();
        let sv = g
            .constant(segs.clone().reshaped(vec![1, 3, 4]).unwrap())
            .unwrap();
        let tv = g.constant(texts.clone()).unwrap();
        let inv = inv_tau_var(&mut g, tau);
        let s = similarity(&mut g, sv, tv, inv).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (0..4).map(|c| segs.at(&[i, c]) * texts.at(&[j, c])).sum::<f64>() / tau)
                .collect();
            let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let den: f64 = e.iter().sum();
            for j in 0..2 {
                assert!((g.value(s).at(&[0, i, j]) - e[j] / den).abs() < 1e-6);
            }
            let total: f64 = (0..2).map(|j| g.value(s).at(&[0, i, j])).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predicted_mask_routes_one_hot_assignments() {
        let mut g = Graph::<f64>::new();
        // A: patch 0 -> seg 1, patch 1 -> seg 0; S rows are distributions
        let a = g
            .constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let s = g
            .constant(Tensor::new(vec![1, 2, 3], vec![0.7, 0.2, 0.1, 0.05, 0.9, 0.05]).unwrap())
            .unwrap();
        let mp = predict_masks(&mut g, a, s).unwrap();
        // patch 0 takes seg 1's row, patch 1 takes seg 0's row
        assert_eq!(
            g.value(mp).data(),
            &[0.05, 0.9, 0.05, 0.7, 0.2, 0.1]
        );
        for i in 0..2 {
            let sum: f64 = (0..3).map(|b| g.value(mp).at(&[0, i, b])).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predicted_mask_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(53, "mp");
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2], |_| rng.uniform_range(0.0, 1.0));
        let s = Tensor::<f64>::from_fn(vec![2, 2, 4], |_| rng.uniform_range(0.0, 1.0));
        let mut g = Graph::new();
        let av = g.constant(a.clone()).unwrap();
        let sv = g.constant(s.clone()).unwrap();
        let mp = predict_masks(&mut g, av, sv).unwrap();
        for m in 0..2 {
            for i in 0..3 {
                for b in 0..4 {
                    let want: f64 = (0..2).map(|k| a.at(&[m, i, k]) * s.at(&[m, k, b])).sum();
                    assert!((g.value(mp).at(&[m, i, b]) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn seg_loss_analytic_cases() {
        let mut g = Graph::<f64>::new();
        let mask = Tensor::new(vec![1, 2, 4], {
            let mut v = vec![0.0; 8];
            v[1] = 1.0;
            v[4 + 2] = 1.0;
            v
        })
        .unwrap();
        let mv = g.constant(mask.clone()).unwrap();

        // perfect prediction
        let perfect = g.constant(mask.clone()).unwrap();
        let l = seg_loss(&mut g, perfect, mv).unwrap();
        assert!(g.value(l).item().abs() < 1e-9);

        // uniform prediction -> ln B
        let uniform = g.constant(Tensor::full(vec![1, 2, 4], 0.25)).unwrap();
        let l = seg_loss(&mut g, uniform, mv).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-9);

        // random case vs direct evaluation
        let mut rng = RngStream::new(59, "seg");
        let mut p = Tensor::<f64>::from_fn(vec![1, 2, 4], |_| rng.uniform_range(0.05, 1.0));
        for i in 0..2 {
            let row = &mut p.data_mut()[i * 4..(i + 1) * 4];
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let want = -(p.at(&[0, 0, 1]).ln() + p.at(&[0, 1, 2]).ln()) / 2.0;
        let pv = g.constant(p).unwrap();
        let l = seg_loss(&mut g, pv, mv).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-6);
    }

    #[test]
    fn total_equals_manual_sum_of_terms() {
        let mut rng = RngStream::new(61, "tot");
        let b = 4;
        let d = 6;
        let mut g = Graph::<f64>::new();
        let z_re = g.constant(unit_rows(&mut rng, b, d)).unwrap();
        let z_ori = g.constant(unit_rows(&mut rng, b, d)).unwrap();
        let z_txt = g.constant(unit_rows(&mut rng, b, d)).unwrap();
        let p1 = g.constant(unit_rows(&mut rng, b, d)).unwrap();
        let p2 = g.constant(unit_rows(&mut rng, b, d)).unwrap();
        let log_tau = g.constant(Tensor::scalar(0.07f64.ln())).unwrap();

        // two groups of M=2, N=3, s2=2
        let mut groups = Vec::new();
        for off in [0usize, 2] {
            let mut a = Tensor::<f64>::zeros(vec![2, 3, 2]);
            for i in 0..6 {
                let hot = (i * 7 + off) % 2;
                a.data_mut()[i * 2 + hot] = 1.0;
            }
            let seg = unit_rows(&mut rng, 4, d).reshaped(vec![2, 2, d]).unwrap();
            let plan = crate::mixing::MixPlan::identity(2, 3, off);
            let mask = crate::mixing::build_mixed_mask::<f64>(&plan, b).unwrap();
            groups.push(SegGroupInputs {
                attention: g.constant(a).unwrap(),
                seg_embed: g.constant(seg).unwrap(),
                mask: g.constant(mask).unwrap(),
            });
        }

        let bundle = total_loss(
            &mut g,
            &groups,
            z_re,
            z_ori,
            z_txt,
            &[p1, p2],
            log_tau,
            LossWeights::default(),
        )
        .unwrap();
        let v = bundle.values(&g);
        let manual = v.seg + v.re_pair + v.re_multilabel + v.ori_pair + v.ori_multilabel;
        assert!((v.total - manual).abs() < 1e-9);
        for term in [v.seg, v.re_pair, v.re_multilabel, v.ori_pair, v.ori_multilabel] {
            assert!(term >= 0.0, "loss terms must be nonnegative, got {term}");
        }
    }
}
