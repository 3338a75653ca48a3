//! Model hyperparameters.

use crate::error::{Error, Result};

/// Every architectural knob of the image and text encoders.
///
/// `desk()` is the default configuration all tests and tools use; it scales
/// the reference architecture down to something a laptop can train.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input image side in pixels (H = W).
    pub image_size: usize,
    pub patch_size: usize,
    /// Hidden dimensionality of the image encoder.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Stage-1 learnable group tokens.
    pub s1: usize,
    /// Stage-2 segment tokens.
    pub s2: usize,
    /// Transformer layers applied to patch tokens before mixing.
    pub contextual_layers: usize,
    /// Transformer layers of the progressive (stage-1) stack.
    pub progressive_layers: usize,
    /// How many progressive layers receive the mixed-feature injection (P).
    /// Ablating P below `progressive_layers` keeps the parameter count fixed.
    pub inject_layers: usize,
    /// Layers between grouping stage 1 and stage 2.
    pub post1_layers: usize,
    /// Layers applied to the segment tokens after grouping stage 2.
    pub post2_layers: usize,
    /// Joint image/text embedding dimensionality (D).
    pub joint_dim: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    /// Images per mix group (M).
    pub group_size: usize,
    /// Prompt labels per image for the multi-label loss (K).
    pub prompt_count: usize,
    pub tau_init: f64,
    pub gumbel_temperature: f64,
    /// Contextual mixing: mix after the contextual layer (true) or before it
    /// (false, the CM-off ablation).
    pub cm_enabled: bool,
    pub seed: u64,
}

/// Clamp range for the learnable temperature.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

impl ModelConfig {
    /// Desk-scale defaults: 64×64 images, 8×8 patches, 64-dim encoder.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            s1: 16,
            s2: 8,
            contextual_layers: 1,
            progressive_layers: 4,
            inject_layers: 4,
            post1_layers: 2,
            post2_layers: 2,
            joint_dim: 32,
            text_dim: 32,
            text_layers: 4,
            text_heads: 2,
            max_text_len: 16,
            group_size: 4,
            prompt_count: 3,
            tau_init: 0.07,
            gumbel_temperature: 1.0,
            cm_enabled: true,
            seed: 42,
        }
    }

    /// Minimal configuration for 64-bit gradient verification:
    /// d=8, N=4, M=2, K=2.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            s1: 4,
            s2: 2,
            contextual_layers: 1,
            progressive_layers: 1,
            inject_layers: 1,
            post1_layers: 1,
            post2_layers: 1,
            joint_dim: 8,
            text_dim: 8,
            text_layers: 1,
            text_heads: 1,
            max_text_len: 16,
            group_size: 2,
            prompt_count: 2,
            tau_init: 0.07,
            gumbel_temperature: 1.0,
            cm_enabled: true,
            seed: 7,
        }
    }

    /// Patches per image (N).
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened pixel count per patch (patch² · 3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let n = self.n_patches();
        if !(self.s2 <= self.s1 && self.s1 <= n) {
            return fail(format!("need s2 <= s1 <= N, got s2={} s1={} N={n}", self.s2, self.s1));
        }
        if self.s2 == 0 {
            return fail("s2 must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.text_dim == 0 || self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return fail(format!(
                "text_dim {} must be divisible by text_heads {}",
                self.text_dim, self.text_heads
            ));
        }
        if self.inject_layers > self.progressive_layers {
            return fail(format!(
                "inject_layers {} exceeds progressive_layers {}",
                self.inject_layers, self.progressive_layers
            ));
        }
        if self.group_size == 0 {
            return fail("group_size must be at least 1".into());
        }
        if self.max_text_len < 2 {
            return fail("max_text_len must hold at least BOS and EOS".into());
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return fail(format!("tau_init {} outside [{TAU_MIN}, {TAU_MAX}]", self.tau_init));
        }
        if self.gumbel_temperature <= 0.0 {
            return fail("gumbel_temperature must be positive".into());
        }
        Ok(())
    }

    /// Group size must divide the batch.
    pub fn validate_batch(&self, batch_size: usize) -> Result<()> {
        if batch_size == 0 || batch_size % self.group_size != 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be a positive multiple of group size {}",
                self.group_size
            )));
        }
        Ok(())
    }
}
