//! Zero-shot evaluation: segmentation, mIoU, mixed-patch reorganization,
//! and classification. Only `eval_reorg` touches the mixed branch; the
//! other paths run the original branch alone.

use crate::encoders::grouping::Assignment;
use crate::encoders::image::encode_image_original;
use crate::encoders::text::encode_text;
use crate::encoders::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{predict_masks, similarity, temperature};
use crate::mixing::{encode_group, MixPlan};
use crate::numerics::{Graph, RngStream, Tensor};
use crate::raster::Raster;
use crate::synthdata::{tokenize, SyntheticScene, Vocab};

/// Class captions with their text embeddings (`[C, D]`, unit rows).
pub struct ClassSet {
    pub captions: Vec<String>,
    pub embeddings: Tensor<f32>,
}

impl ClassSet {
    pub fn build(
        params: &EncoderParams<Tensor<f32>>,
        cfg: &ModelConfig,
        vocab: &Vocab,
        captions: Vec<String>,
    ) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Config("class caption list is empty".into()));
        }
        let mut g = Graph::<f32>::new();
        let vars = params.bind_frozen(&mut g)?;
        let mut rows = Vec::with_capacity(captions.len());
        for caption in &captions {
            let ids = tokenize(caption, vocab, cfg.max_text_len)?;
            let z = encode_text(&mut g, &vars.text, cfg, &ids)?;
            rows.push(g.value(z).data().to_vec());
        }
        let d = cfg.joint_dim;
        let mut data = Vec::with_capacity(captions.len() * d);
        for row in rows {
            data.extend_from_slice(&row);
        }
        Ok(ClassSet {
            embeddings: Tensor::new(vec![captions.len(), d], data)?,
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Global class id (1-based; 0 is background) for a noun phrase, by
    /// caption substring match.
    pub fn class_of_phrase(&self, phrase: &str) -> Option<usize> {
        self.captions.iter().position(|c| c.contains(phrase)).map(|i| i + 1)
    }
}

/// Original-branch outputs extracted as plain tensors.
pub struct OriginalForward {
    /// `[N, s2]` hard patch→segment map.
    pub attention: Tensor<f32>,
    /// `[s2, D]` unit-row segment embeddings.
    pub seg_embed: Tensor<f32>,
    /// `[D]` pooled embedding.
    pub z: Tensor<f32>,
}

pub fn forward_original(
    params: &EncoderParams<Tensor<f32>>,
    cfg: &ModelConfig,
    image: &Raster,
) -> Result<OriginalForward> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind_frozen(&mut g)?;
    let trace = encode_image_original(&mut g, &vars, cfg, image, Assignment::Deterministic)?;
    Ok(OriginalForward {
        attention: g.value(trace.out.attention).clone(),
        seg_embed: g.value(trace.out.seg_embed).clone(),
        z: g.value(trace.out.z).clone(),
    })
}

/// Per-patch class labels (`N` entries, 0 = background) for one image:
/// each segment takes the argmax-cosine class (background below threshold),
/// each patch takes its segment's label.
pub fn patch_labels(
    forward: &OriginalForward,
    classes: &ClassSet,
    threshold: f64,
) -> Vec<u8> {
    let s2 = forward.seg_embed.shape()[0];
    let d = forward.seg_embed.shape()[1];
    let c = classes.len();
    let mut seg_label = vec![0u8; s2];
    for s in 0..s2 {
        let mut best = 0usize;
        let mut best_cos = f32::NEG_INFINITY;
        for ci in 0..c {
            let mut cos = 0f32;
            for k in 0..d {
                cos += forward.seg_embed.at(&[s, k]) * classes.embeddings.at(&[ci, k]);
            }
            if cos > best_cos {
                best_cos = cos;
                best = ci;
            }
        }
        seg_label[s] = if (best_cos as f64) < threshold {
            0
        } else {
            (best + 1) as u8
        };
    }
    let n = forward.attention.shape()[0];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut arg = 0usize;
        let mut max = f32::NEG_INFINITY;
        for s in 0..s2 {
            let v = forward.attention.at(&[i, s]);
            if v > max {
                max = v;
                arg = s;
            }
        }
        labels[i] = seg_label[arg];
    }
    labels
}

/// Replicate patch labels to pixel resolution.
pub fn upsample_patches(labels: &[u8], cfg: &ModelConfig) -> Vec<u8> {
    let side = cfg.image_size / cfg.patch_size;
    let mut out = vec![0u8; cfg.image_size * cfg.image_size];
    for py in 0..side {
        for px in 0..side {
            let l = labels[py * side + px];
            for dy in 0..cfg.patch_size {
                for dx in 0..cfg.patch_size {
                    out[(py * cfg.patch_size + dy) * cfg.image_size + px * cfg.patch_size + dx] = l;
                }
            }
        }
    }
    out
}

/// Zero-shot segmentation of one image to pixel class ids (0 = background).
pub fn segment(
    params: &EncoderParams<Tensor<f32>>,
    cfg: &ModelConfig,
    image: &Raster,
    classes: &ClassSet,
    threshold: f64,
) -> Result<Vec<u8>> {
    let fwd = forward_original(params, cfg, image)?;
    let labels = patch_labels(&fwd, classes, threshold);
    Ok(upsample_patches(&labels, cfg))
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// (class id, IoU) for every class present or predicted.
    pub per_class: Vec<(usize, f64)>,
    pub miou: f64,
}

/// Map a scene's local mask ids to global class ids under a class set.
pub fn scene_gt_global(scene: &SyntheticScene, classes: &ClassSet) -> Vec<u8> {
    let map: Vec<u8> = scene
        .nouns
        .iter()
        .map(|n| classes.class_of_phrase(&n.phrase()).unwrap_or(0) as u8)
        .collect();
    scene
        .pixel_mask
        .iter()
        .map(|&c| if c == 0 { 0 } else { map[c as usize - 1] })
        .collect()
}

fn miou_from_counts(inter: &[u64], union: &[u64]) -> MiouResult {
    let mut per_class = Vec::new();
    for c in 0..inter.len() {
        if union[c] > 0 {
            per_class.push((c, inter[c] as f64 / union[c] as f64));
        }
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64
    };
    MiouResult { per_class, miou }
}

/// Mean IoU over the dataset. Classes that are never present nor predicted
/// are excluded from the mean; background participates as class 0.
pub fn eval_miou(
    params: &EncoderParams<Tensor<f32>>,
    cfg: &ModelConfig,
    scenes: &[SyntheticScene],
    classes: &ClassSet,
    threshold: f64,
) -> Result<MiouResult> {
    let c = classes.len() + 1;
    let mut inter = vec![0u64; c];
    let mut union = vec![0u64; c];
    for scene in scenes {
        let pred = segment(params, cfg, &scene.image, classes, threshold)?;
        let gt = scene_gt_global(scene, classes);
        accumulate_iou(&pred, &gt, &mut inter, &mut union);
    }
    Ok(miou_from_counts(&inter, &union))
}

pub fn accumulate_iou(pred: &[u8], gt: &[u8], inter: &mut [u64], union: &mut [u64]) {
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
}

/// Chance-level reference: every patch gets a uniformly random class label
/// (including background), scored the same way and averaged over repeats.
pub fn random_segment_miou(
    cfg: &ModelConfig,
    scenes: &[SyntheticScene],
    classes: &ClassSet,
    repeats: usize,
    seed: u64,
) -> f64 {
    let c = classes.len() + 1;
    let n = cfg.n_patches();
    let mut total = 0.0;
    for rep in 0..repeats {
        let mut rng = RngStream::new(seed, &format!("random-baseline.{rep}"));
        let mut inter = vec![0u64; c];
        let mut union = vec![0u64; c];
        for scene in scenes {
            let labels: Vec<u8> = (0..n).map(|_| rng.below(c as u64) as u8).collect();
            let pred = upsample_patches(&labels, cfg);
            let gt = scene_gt_global(scene, classes);
            accumulate_iou(&pred, &gt, &mut inter, &mut union);
        }
        total += miou_from_counts(&inter, &union).miou;
    }
    total / repeats.max(1) as f64
}

/// Row-stochastic M×M patch-routing confusion matrix.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub m: usize,
    /// Row-major `m × m`; rows sum to 1.
    pub rows: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.m + j]
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.m).map(|i| self.at(i, i)).sum::<f64>() / self.m as f64
    }
}

pub struct ReorgResult {
    pub confusion: ConfusionMatrix,
    /// Reorganized rasters of the first evaluated group.
    pub reorganized: Vec<Raster>,
}

/// Mixed-branch reorganization evaluation over `groups` seeded mix groups,
/// cycling through the dataset. Each patch of each mixed image is routed to
/// the caption column with the largest predicted mass; the confusion matrix
/// compares that routing to the true source.
pub fn eval_reorg(
    params: &EncoderParams<Tensor<f32>>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    scenes: &[SyntheticScene],
    groups: usize,
    seed: u64,
) -> Result<ReorgResult> {
    let m = cfg.group_size;
    let n = cfg.n_patches();
    if scenes.len() < m {
        return Err(Error::Config(format!(
            "reorganization needs at least M={m} scenes, got {}",
            scenes.len()
        )));
    }
    if groups == 0 {
        return Err(Error::Config("eval_reorg needs at least one group".into()));
    }
    let mut stream = RngStream::new(seed, "evalmix");
    let mut counts = vec![0u64; m * m];
    let mut reorganized = Vec::new();

    for gi in 0..groups {
        let start = (gi * m) % scenes.len();
        let group: Vec<&SyntheticScene> =
            (0..m).map(|j| &scenes[(start + j) % scenes.len()]).collect();
        let plan = MixPlan::generate(&mut stream, m, n, 0);

        let mut g = Graph::<f32>::new();
        let vars = params.bind_frozen(&mut g)?;
        let images: Vec<&Raster> = group.iter().map(|s| &s.image).collect();
        let enc = encode_group(&mut g, &vars, cfg, &images, &plan, Assignment::Deterministic)?;
        let mut z_text = Vec::with_capacity(m);
        for scene in &group {
            z_text.push(encode_text(&mut g, &vars.text, cfg, &scene.token_ids)?);
        }
        let z_texts = g.stack0(&z_text)?;
        let att: Vec<_> = enc.mixed.iter().map(|o| o.attention).collect();
        let seg: Vec<_> = enc.mixed.iter().map(|o| o.seg_embed).collect();
        let att = g.stack0(&att)?;
        let seg = g.stack0(&seg)?;
        let (_tau, inv_tau) = temperature(&mut g, vars.log_tau)?;
        let s = similarity(&mut g, seg, z_texts, inv_tau)?;
        let mp = predict_masks(&mut g, att, s)?;
        let mp = g.value(mp).clone();

        let mut routing = vec![0usize; m * n];
        for mi in 0..m {
            for i in 0..n {
                let mut arg = 0usize;
                let mut max = f32::NEG_INFINITY;
                for j in 0..m {
                    let v = mp.at(&[mi, i, j]);
                    if v > max {
                        max = v;
                        arg = j;
                    }
                }
                routing[mi * n + i] = arg;
                counts[plan.source(mi, i) * m + arg] += 1;
            }
        }

        if gi == 0 {
            reorganized = reorganize_rasters(cfg, &group, &plan, &routing);
        }
    }

    let mut rows = vec![0f64; m * m];
    for i in 0..m {
        let total: u64 = (0..m).map(|j| counts[i * m + j]).sum();
        for j in 0..m {
            rows[i * m + j] = counts[i * m + j] as f64 / total.max(1) as f64;
        }
    }
    Ok(ReorgResult {
        confusion: ConfusionMatrix { m, rows },
        reorganized,
    })
}

/// Route each mixed patch's pixels to its predicted image slot; unclaimed
/// patches stay gray.
fn reorganize_rasters(
    cfg: &ModelConfig,
    group: &[&SyntheticScene],
    plan: &MixPlan,
    routing: &[usize],
) -> Vec<Raster> {
    let m = cfg.group_size;
    let n = cfg.n_patches();
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut out = vec![Raster::new(cfg.image_size, cfg.image_size); m];
    for r in out.iter_mut() {
        for v in r.data.iter_mut() {
            *v = crate::synthdata::scene::GRAY;
        }
    }
    for mi in 0..m {
        for i in 0..n {
            let dest = routing[mi * n + i];
            let src_scene = group[plan.source(mi, i)];
            let (py, px) = (i / side, i % side);
            for dy in 0..p {
                for dx in 0..p {
                    let pix = src_scene.image.pixel(py * p + dy, px * p + dx);
                    out[dest].set_pixel(py * p + dy, px * p + dx, pix);
                }
            }
        }
    }
    out
}

/// Zero-shot classification accuracy over single-object scenes.
pub fn eval_classify(
    params: &EncoderParams<Tensor<f32>>,
    cfg: &ModelConfig,
    scenes: &[SyntheticScene],
    classes: &ClassSet,
) -> Result<(f64, f64)> {
    let singles: Vec<&SyntheticScene> =
        scenes.iter().filter(|s| s.nouns.len() == 1).collect();
    if singles.is_empty() {
        return Err(Error::Config(
            "classification needs scenes with exactly one object".into(),
        ));
    }
    let c = classes.len();
    let top_k = c.min(5);
    let d = cfg.joint_dim;
    let (mut hit1, mut hitk, mut total) = (0u64, 0u64, 0u64);
    for scene in singles {
        let Some(true_class) = classes.class_of_phrase(&scene.nouns[0].phrase()) else {
            continue;
        };
        let true_idx = true_class - 1;
        let fwd = forward_original(params, cfg, &scene.image)?;
        let mut scored: Vec<(usize, f32)> = (0..c)
            .map(|ci| {
                let mut cos = 0f32;
                for k in 0..d {
                    cos += fwd.z.at(&[k]) * classes.embeddings.at(&[ci, k]);
                }
                (ci, cos)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        total += 1;
        if scored[0].0 == true_idx {
            hit1 += 1;
        }
        if scored[..top_k].iter().any(|&(ci, _)| ci == true_idx) {
            hitk += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config(
            "no single-object scene matched the class list".into(),
        ));
    }
    Ok((hit1 as f64 / total as f64, hitk as f64 / total as f64))
}

/// "a photo of a {}" captions for a noun list (the standard class set).
pub fn class_captions_for(nouns: &[crate::synthdata::Noun]) -> Vec<String> {
    nouns
        .iter()
        .map(|n| format!("a photo of a {}", n.phrase()))
        .collect()
}
