//! Training configuration: flat key=value files, canonical digests.

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::rng::fnv1a64;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub checkpoint_interval: usize,
    /// Raw-cosine background threshold used by `segment`.
    pub bg_threshold: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            batch_size: 16,
            steps: 2000,
            lr: 3e-4,
            warmup_frac: 0.05,
            weight_decay: 0.05,
            checkpoint_interval: 500,
            bg_threshold: 0.2,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.validate_batch(self.batch_size)?;
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must be in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` file; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |what: &str| Error::Config(format!("line {}: bad {what}: {value:?}", lineno + 1));
            macro_rules! set {
                ($field:expr, $what:literal) => {
                    $field = value.parse().map_err(|_| bad($what))?
                };
            }
            match key {
                "seed" => set!(cfg.model.seed, "seed"),
                "image_size" => set!(cfg.model.image_size, "image_size"),
                "patch_size" => set!(cfg.model.patch_size, "patch_size"),
                "dim" => set!(cfg.model.dim, "dim"),
                "heads" => set!(cfg.model.heads, "heads"),
                "mlp_ratio" => set!(cfg.model.mlp_ratio, "mlp_ratio"),
                "s1" => set!(cfg.model.s1, "s1"),
                "s2" => set!(cfg.model.s2, "s2"),
                "contextual_layers" => set!(cfg.model.contextual_layers, "contextual_layers"),
                "progressive_layers" => {
                    set!(cfg.model.progressive_layers, "progressive_layers");
                    // P defaults to the full stack unless overridden later
                    cfg.model.inject_layers = cfg.model.inject_layers.min(cfg.model.progressive_layers);
                }
                "inject_layers" => set!(cfg.model.inject_layers, "inject_layers"),
                "post1_layers" => set!(cfg.model.post1_layers, "post1_layers"),
                "post2_layers" => set!(cfg.model.post2_layers, "post2_layers"),
                "joint_dim" => set!(cfg.model.joint_dim, "joint_dim"),
                "text_dim" => set!(cfg.model.text_dim, "text_dim"),
                "text_layers" => set!(cfg.model.text_layers, "text_layers"),
                "text_heads" => set!(cfg.model.text_heads, "text_heads"),
                "max_text_len" => set!(cfg.model.max_text_len, "max_text_len"),
                "group_size" => set!(cfg.model.group_size, "group_size"),
                "prompt_count" => set!(cfg.model.prompt_count, "prompt_count"),
                "tau_init" => set!(cfg.model.tau_init, "tau_init"),
                "gumbel_temperature" => set!(cfg.model.gumbel_temperature, "gumbel_temperature"),
                "cm_enabled" => set!(cfg.model.cm_enabled, "cm_enabled"),
                "batch_size" => set!(cfg.batch_size, "batch_size"),
                "steps" => set!(cfg.steps, "steps"),
                "lr" => set!(cfg.lr, "lr"),
                "warmup_frac" => set!(cfg.warmup_frac, "warmup_frac"),
                "weight_decay" => set!(cfg.weight_decay, "weight_decay"),
                "checkpoint_interval" => set!(cfg.checkpoint_interval, "checkpoint_interval"),
                "bg_threshold" => set!(cfg.bg_threshold, "bg_threshold"),
                "w_seg" => set!(cfg.weights.seg, "w_seg"),
                "w_re" => set!(cfg.weights.re, "w_re"),
                "w_ori" => set!(cfg.weights.ori, "w_ori"),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form: every key in fixed order (digest input and the
    /// reference for writing config files).
    pub fn canonical_string(&self) -> String {
        let m = &self.model;
        format!(
            "seed={}\nimage_size={}\npatch_size={}\ndim={}\nheads={}\nmlp_ratio={}\ns1={}\ns2={}\n\
             contextual_layers={}\nprogressive_layers={}\ninject_layers={}\npost1_layers={}\n\
             post2_layers={}\njoint_dim={}\ntext_dim={}\ntext_layers={}\ntext_heads={}\n\
             max_text_len={}\ngroup_size={}\nprompt_count={}\ntau_init={}\ngumbel_temperature={}\n\
             cm_enabled={}\nbatch_size={}\nsteps={}\nlr={}\nwarmup_frac={}\nweight_decay={}\n\
             checkpoint_interval={}\nbg_threshold={}\nw_seg={}\nw_re={}\nw_ori={}\n",
            m.seed,
            m.image_size,
            m.patch_size,
            m.dim,
            m.heads,
            m.mlp_ratio,
            m.s1,
            m.s2,
            m.contextual_layers,
            m.progressive_layers,
            m.inject_layers,
            m.post1_layers,
            m.post2_layers,
            m.joint_dim,
            m.text_dim,
            m.text_layers,
            m.text_heads,
            m.max_text_len,
            m.group_size,
            m.prompt_count,
            m.tau_init,
            m.gumbel_temperature,
            m.cm_enabled,
            self.batch_size,
            self.steps,
            self.lr,
            self.warmup_frac,
            self.weight_decay,
            self.checkpoint_interval,
            self.bg_threshold,
            self.weights.seg,
            self.weights.re,
            self.weights.ori,
        )
    }

    /// Digest binding checkpoints to the configuration that produced them.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }
}
