//! The training loop: batch assembly, three-branch forward, backward,
//! optimizer step, metrics log, periodic checkpoints.

use super::optimizer::{lr_at, Adam};
use super::state::{MetricsEntry, TrainState};
use super::trainconfig::TrainConfig;
use crate::encoders::grouping::Assignment;
use crate::encoders::text::encode_text;
use crate::encoders::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, LossValues, LossWeights, SegGroupInputs};
use crate::mixing::{build_mixed_mask, encode_group, MixPlan};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::synthdata::{prompt_labels, SyntheticScene, Vocab};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Build the full three-branch forward pass and loss for one batch.
///
/// Shared by f32 training steps and the f64 end-to-end gradient check;
/// callers supply the plans and prompt sequences so the graph is replayable.
pub fn build_step_loss<F: Scalar>(
    g: &mut Graph<F>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    weights: LossWeights,
    batch: &[&SyntheticScene],
    prompts: &[Vec<Vec<u16>>],
    plans: &[MixPlan],
    mut mode: Assignment<'_>,
) -> Result<LossBundle> {
    let b = batch.len();
    let m = cfg.group_size;
    if b == 0 || b % m != 0 || plans.len() != b / m || prompts.len() != b {
        return Err(Error::Config(format!(
            "batch of {b} images needs {} plans and per-image prompts (got {} / {})",
            b / m.max(1),
            plans.len(),
            prompts.len()
        )));
    }

    let mut z_text = Vec::with_capacity(b);
    for scene in batch {
        z_text.push(encode_text(g, &vars.text, cfg, &scene.token_ids)?);
    }
    let z_texts = g.stack0(&z_text)?;

    let k = cfg.prompt_count;
    let mut z_prompts = Vec::with_capacity(k);
    for ki in 0..k {
        let mut per_image = Vec::with_capacity(b);
        for prompt_set in prompts {
            if prompt_set.len() != k {
                return Err(Error::Config(format!(
                    "expected {k} prompts per image, got {}",
                    prompt_set.len()
                )));
            }
            per_image.push(encode_text(g, &vars.text, cfg, &prompt_set[ki])?);
        }
        z_prompts.push(g.stack0(&per_image)?);
    }

    let mut groups = Vec::with_capacity(b / m);
    let mut z_re: Vec<Option<Var>> = vec![None; b];
    let mut z_ori: Vec<Option<Var>> = vec![None; b];
    for (gi, plan) in plans.iter().enumerate() {
        let offset = gi * m;
        if plan.group_size() != m || plan.group_offset() != offset {
            return Err(Error::Config(format!(
                "plan {gi} has M={} offset={}, expected M={m} offset={offset}",
                plan.group_size(),
                plan.group_offset()
            )));
        }
        let images: Vec<&crate::raster::Raster> =
            batch[offset..offset + m].iter().map(|s| &s.image).collect();
        let enc = encode_group(g, vars, cfg, &images, plan, mode.reborrow())?;

        let att: Vec<Var> = enc.mixed.iter().map(|o| o.attention).collect();
        let seg: Vec<Var> = enc.mixed.iter().map(|o| o.seg_embed).collect();
        let mask = g.constant(build_mixed_mask::<F>(plan, b)?)?;
        groups.push(SegGroupInputs {
            attention: g.stack0(&att)?,
            seg_embed: g.stack0(&seg)?,
            mask,
        });
        for (j, out) in enc.restored.iter().enumerate() {
            z_re[offset + j] = Some(out.z);
        }
        for (j, trace) in enc.original.iter().enumerate() {
            z_ori[offset + j] = Some(trace.out.z);
        }
    }
    let z_re: Vec<Var> = z_re.into_iter().map(|v| v.expect("filled")).collect();
    let z_ori: Vec<Var> = z_ori.into_iter().map(|v| v.expect("filled")).collect();
    let z_restored = g.stack0(&z_re)?;
    let z_original = g.stack0(&z_ori)?;

    total_loss(
        g,
        &groups,
        z_restored,
        z_original,
        z_texts,
        &z_prompts,
        vars.log_tau,
        weights,
    )
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_losses: Option<LossValues>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_path(out_dir: &Path, tag: &str) -> PathBuf {
    out_dir.join(format!("ckpt-{tag}.mxck"))
}

/// Run one optimization step on an explicit batch. Exposed for tests; the
/// loop in [`train`] drives this.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&SyntheticScene],
    vocab: &Vocab,
) -> Result<LossValues> {
    let m = cfg.model.group_size;
    let n = cfg.model.n_patches();
    let k = cfg.model.prompt_count;

    let mut prompts = Vec::with_capacity(batch.len());
    for scene in batch {
        prompts.push(prompt_labels(
            scene,
            k,
            &mut state.rng_data,
            vocab,
            cfg.model.max_text_len,
        )?);
    }
    let plans: Vec<MixPlan> = (0..batch.len() / m)
        .map(|gi| MixPlan::generate(&mut state.rng_mixing, m, n, gi * m))
        .collect();

    let mut g = Graph::<f32>::new();
    let vars = state.params.bind(&mut g)?;
    let bundle = build_step_loss(
        &mut g,
        &vars,
        &cfg.model,
        cfg.weights,
        batch,
        &prompts,
        &plans,
        Assignment::Stochastic(&mut state.rng_gumbel),
    )?;
    let values = bundle.values(&g);
    g.backward(bundle.total)?;

    let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut missing = false;
    vars.for_each(&mut |name, var| match g.grad(*var) {
        Some(t) => {
            grads.insert(name.to_string(), t);
        }
        None => missing = true,
    });
    if missing {
        return Err(Error::Numerical("a parameter is missing its gradient".into()));
    }

    let t = state.step + 1;
    let lr = lr_at(state.step, cfg.steps as u64, cfg.lr, cfg.warmup_frac);
    state
        .adam
        .update(&mut state.params, &grads, t, lr, cfg.weight_decay)?;
    state.params.clamp_tau();
    state.step = t;
    state.push_metrics(MetricsEntry {
        step: t,
        losses: [
            values.seg as f32,
            values.re_pair as f32,
            values.re_multilabel as f32,
            values.ori_pair as f32,
            values.ori_multilabel as f32,
            values.total as f32,
        ],
    });
    Ok(values)
}

/// Full training run over a scene corpus. Writes `metrics.csv`, a step-0
/// checkpoint, periodic checkpoints, and `ckpt-final.mxck`; a non-finite
/// loss aborts with the last good checkpoint retained on disk.
pub fn train(cfg: &TrainConfig, scenes: &[SyntheticScene], out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let vocab = Vocab::builtin();
    if scenes.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} scenes cannot fill a batch of {}",
            scenes.len(),
            cfg.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let digest = cfg.digest();
    let mut state = TrainState::new(cfg, &vocab);
    state.save(&checkpoint_path(out_dir, "0"), digest)?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(
        metrics,
        "step,seg,re_pair,re_multilabel,ori_pair,ori_multilabel,total,lr,tau"
    )?;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut last_values = None;
    for _ in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..scenes.len()).collect();
            state.rng_data.shuffle(&mut order);
            cursor = 0;
        }
        let batch: Vec<&SyntheticScene> = order[cursor..cursor + cfg.batch_size]
            .iter()
            .map(|&i| &scenes[i])
            .collect();
        cursor += cfg.batch_size;

        let lr = lr_at(state.step, cfg.steps as u64, cfg.lr, cfg.warmup_frac);
        let values = match train_step(&mut state, cfg, &batch, &vocab) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                metrics.flush()?;
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {}: {v:?}; last checkpoint retained",
                    state.step
                )));
            }
            Err(e) => {
                metrics.flush()?;
                return Err(e);
            }
        };
        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{}",
            state.step,
            values.seg,
            values.re_pair,
            values.re_multilabel,
            values.ori_pair,
            values.ori_multilabel,
            values.total,
            lr,
            state.params.tau(),
        )?;
        if state.step % cfg.checkpoint_interval as u64 == 0 {
            state.save(&checkpoint_path(out_dir, &state.step.to_string()), digest)?;
        }
        last_values = Some(values);
    }
    metrics.flush()?;

    let final_path = if cfg.steps > 0 {
        let p = checkpoint_path(out_dir, "final");
        state.save(&p, digest)?;
        p
    } else {
        checkpoint_path(out_dir, "0")
    };

    Ok(TrainReport {
        steps_run: state.step,
        final_losses: last_values,
        metrics_path,
        final_checkpoint: final_path,
    })
}
