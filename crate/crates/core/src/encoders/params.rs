//! Learnable parameters, generic over storage.
//!
//! `EncoderParams<Tensor<F>>` holds the raw weights; `EncoderParams<Var>` is
//! the same structure bound into a graph for one training step, so the three
//! branches share a single set of leaves.

use super::config::{ModelConfig, TAU_MAX, TAU_MIN};
use crate::error::Result;
use crate::numerics::{Graph, RngStream, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct LayerP<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub q_w: T,
    pub q_b: T,
    pub k_w: T,
    pub k_b: T,
    pub v_w: T,
    pub v_b: T,
    pub o_w: T,
    pub o_b: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub mlp1_w: T,
    pub mlp1_b: T,
    pub mlp2_w: T,
    pub mlp2_b: T,
}

#[derive(Debug, Clone)]
pub struct GroupingP<T> {
    pub ln_g_g: T,
    pub ln_g_b: T,
    pub ln_p_g: T,
    pub ln_p_b: T,
    pub q_w: T,
    pub k_w: T,
    pub v_w: T,
    pub o_w: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub mlp1_w: T,
    pub mlp1_b: T,
    pub mlp2_w: T,
    pub mlp2_b: T,
}

#[derive(Debug, Clone)]
pub struct MlpP<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct TextP<T> {
    pub tok_embed: T,
    pub pos_embed: T,
    pub layers: Vec<LayerP<T>>,
    pub ln_f_g: T,
    pub ln_f_b: T,
    pub proj: T,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub pos_embed: T,
    pub group_tokens1: T,
    pub group_tokens2: T,
    pub ctx_layers: Vec<LayerP<T>>,
    pub prog_layers: Vec<LayerP<T>>,
    pub post1_layers: Vec<LayerP<T>>,
    pub post2_layers: Vec<LayerP<T>>,
    pub grouping1: GroupingP<T>,
    pub grouping2: GroupingP<T>,
    pub out_mlp: MlpP<T>,
    pub text: TextP<T>,
    /// Learnable temperature stored as log τ, clamped after each update.
    pub log_tau: T,
}

impl<T> LayerP<T> {
    fn fields(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("q.w", &self.q_w),
            ("q.b", &self.q_b),
            ("k.w", &self.k_w),
            ("k.b", &self.k_b),
            ("v.w", &self.v_w),
            ("v.b", &self.v_b),
            ("o.w", &self.o_w),
            ("o.b", &self.o_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp1.w", &self.mlp1_w),
            ("mlp1.b", &self.mlp1_b),
            ("mlp2.w", &self.mlp2_w),
            ("mlp2.b", &self.mlp2_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 16] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("q.w", &mut self.q_w),
            ("q.b", &mut self.q_b),
            ("k.w", &mut self.k_w),
            ("k.b", &mut self.k_b),
            ("v.w", &mut self.v_w),
            ("v.b", &mut self.v_b),
            ("o.w", &mut self.o_w),
            ("o.b", &mut self.o_b),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp1.w", &mut self.mlp1_w),
            ("mlp1.b", &mut self.mlp1_b),
            ("mlp2.w", &mut self.mlp2_w),
            ("mlp2.b", &mut self.mlp2_b),
        ]
    }

    fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<LayerP<U>> {
        Ok(LayerP {
            ln1_g: f(&self.ln1_g)?,
            ln1_b: f(&self.ln1_b)?,
            q_w: f(&self.q_w)?,
            q_b: f(&self.q_b)?,
            k_w: f(&self.k_w)?,
            k_b: f(&self.k_b)?,
            v_w: f(&self.v_w)?,
            v_b: f(&self.v_b)?,
            o_w: f(&self.o_w)?,
            o_b: f(&self.o_b)?,
            ln2_g: f(&self.ln2_g)?,
            ln2_b: f(&self.ln2_b)?,
            mlp1_w: f(&self.mlp1_w)?,
            mlp1_b: f(&self.mlp1_b)?,
            mlp2_w: f(&self.mlp2_w)?,
            mlp2_b: f(&self.mlp2_b)?,
        })
    }
}

impl<T> GroupingP<T> {
    fn fields(&self) -> [(&'static str, &T); 14] {
        [
            ("ln_g.g", &self.ln_g_g),
            ("ln_g.b", &self.ln_g_b),
            ("ln_p.g", &self.ln_p_g),
            ("ln_p.b", &self.ln_p_b),
            ("q.w", &self.q_w),
            ("k.w", &self.k_w),
            ("v.w", &self.v_w),
            ("o.w", &self.o_w),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp1.w", &self.mlp1_w),
            ("mlp1.b", &self.mlp1_b),
            ("mlp2.w", &self.mlp2_w),
            ("mlp2.b", &self.mlp2_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 14] {
        [
            ("ln_g.g", &mut self.ln_g_g),
            ("ln_g.b", &mut self.ln_g_b),
            ("ln_p.g", &mut self.ln_p_g),
            ("ln_p.b", &mut self.ln_p_b),
            ("q.w", &mut self.q_w),
            ("k.w", &mut self.k_w),
            ("v.w", &mut self.v_w),
            ("o.w", &mut self.o_w),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp1.w", &mut self.mlp1_w),
            ("mlp1.b", &mut self.mlp1_b),
            ("mlp2.w", &mut self.mlp2_w),
            ("mlp2.b", &mut self.mlp2_b),
        ]
    }

    fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<GroupingP<U>> {
        Ok(GroupingP {
            ln_g_g: f(&self.ln_g_g)?,
            ln_g_b: f(&self.ln_g_b)?,
            ln_p_g: f(&self.ln_p_g)?,
            ln_p_b: f(&self.ln_p_b)?,
            q_w: f(&self.q_w)?,
            k_w: f(&self.k_w)?,
            v_w: f(&self.v_w)?,
            o_w: f(&self.o_w)?,
            ln2_g: f(&self.ln2_g)?,
            ln2_b: f(&self.ln2_b)?,
            mlp1_w: f(&self.mlp1_w)?,
            mlp1_b: f(&self.mlp1_b)?,
            mlp2_w: f(&self.mlp2_w)?,
            mlp2_b: f(&self.mlp2_b)?,
        })
    }
}

impl<T> MlpP<T> {
    fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<MlpP<U>> {
        Ok(MlpP {
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
        })
    }
}

impl<T> EncoderParams<T> {
    /// Visit every parameter with its canonical name, in a fixed order.
    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        f("img.patch.w", &self.patch_w);
        f("img.patch.b", &self.patch_b);
        f("img.pos", &self.pos_embed);
        f("img.group1", &self.group_tokens1);
        f("img.group2", &self.group_tokens2);
        let stacks: [(&str, &Vec<LayerP<T>>); 4] = [
            ("img.ctx", &self.ctx_layers),
            ("img.prog", &self.prog_layers),
            ("img.post1", &self.post1_layers),
            ("img.post2", &self.post2_layers),
        ];
        for (prefix, layers) in stacks {
            for (i, layer) in layers.iter().enumerate() {
                for (name, t) in layer.fields() {
                    f(&format!("{prefix}{i}.{name}"), t);
                }
            }
        }
        for (name, t) in self.grouping1.fields() {
            f(&format!("img.grouping1.{name}"), t);
        }
        for (name, t) in self.grouping2.fields() {
            f(&format!("img.grouping2.{name}"), t);
        }
        f("img.out.w1", &self.out_mlp.w1);
        f("img.out.b1", &self.out_mlp.b1);
        f("img.out.w2", &self.out_mlp.w2);
        f("img.out.b2", &self.out_mlp.b2);
        f("txt.tok", &self.text.tok_embed);
        f("txt.pos", &self.text.pos_embed);
        for (i, layer) in self.text.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                f(&format!("txt.layer{i}.{name}"), t);
            }
        }
        f("txt.ln_f.g", &self.text.ln_f_g);
        f("txt.ln_f.b", &self.text.ln_f_b);
        f("txt.proj", &self.text.proj);
        f("tau.log", &self.log_tau);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        f("img.patch.w", &mut self.patch_w);
        f("img.patch.b", &mut self.patch_b);
        f("img.pos", &mut self.pos_embed);
        f("img.group1", &mut self.group_tokens1);
        f("img.group2", &mut self.group_tokens2);
        for (prefix, layers) in [
            ("img.ctx", &mut self.ctx_layers),
            ("img.prog", &mut self.prog_layers),
            ("img.post1", &mut self.post1_layers),
            ("img.post2", &mut self.post2_layers),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                for (name, t) in layer.fields_mut() {
                    f(&format!("{prefix}{i}.{name}"), t);
                }
            }
        }
        for (name, t) in self.grouping1.fields_mut() {
            f(&format!("img.grouping1.{name}"), t);
        }
        for (name, t) in self.grouping2.fields_mut() {
            f(&format!("img.grouping2.{name}"), t);
        }
        f("img.out.w1", &mut self.out_mlp.w1);
        f("img.out.b1", &mut self.out_mlp.b1);
        f("img.out.w2", &mut self.out_mlp.w2);
        f("img.out.b2", &mut self.out_mlp.b2);
        f("txt.tok", &mut self.text.tok_embed);
        f("txt.pos", &mut self.text.pos_embed);
        for (i, layer) in self.text.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                f(&format!("txt.layer{i}.{name}"), t);
            }
        }
        f("txt.ln_f.g", &mut self.text.ln_f_g);
        f("txt.ln_f.b", &mut self.text.ln_f_b);
        f("txt.proj", &mut self.text.proj);
        f("tau.log", &mut self.log_tau);
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<EncoderParams<U>> {
        Ok(EncoderParams {
            patch_w: f(&self.patch_w)?,
            patch_b: f(&self.patch_b)?,
            pos_embed: f(&self.pos_embed)?,
            group_tokens1: f(&self.group_tokens1)?,
            group_tokens2: f(&self.group_tokens2)?,
            ctx_layers: self.ctx_layers.iter().map(|l| l.try_map(f)).collect::<Result<_>>()?,
            prog_layers: self.prog_layers.iter().map(|l| l.try_map(f)).collect::<Result<_>>()?,
            post1_layers: self.post1_layers.iter().map(|l| l.try_map(f)).collect::<Result<_>>()?,
            post2_layers: self.post2_layers.iter().map(|l| l.try_map(f)).collect::<Result<_>>()?,
            grouping1: self.grouping1.try_map(f)?,
            grouping2: self.grouping2.try_map(f)?,
            out_mlp: self.out_mlp.try_map(f)?,
            text: TextP {
                tok_embed: f(&self.text.tok_embed)?,
                pos_embed: f(&self.text.pos_embed)?,
                layers: self.text.layers.iter().map(|l| l.try_map(f)).collect::<Result<_>>()?,
                ln_f_g: f(&self.text.ln_f_g)?,
                ln_f_b: f(&self.text.ln_f_b)?,
                proj: f(&self.text.proj)?,
            },
            log_tau: f(&self.log_tau)?,
        })
    }
}

/// Initialization scale for weight matrices, token embeddings and positions.
const INIT_STD: f64 = 0.02;

fn normal_tensor<F: Scalar>(rng: &mut RngStream, shape: Vec<usize>, std: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(rng.normal() * std))
}

fn init_layer<F: Scalar>(rng: &mut RngStream, dim: usize, mlp_ratio: usize) -> LayerP<Tensor<F>> {
    let hidden = dim * mlp_ratio;
    LayerP {
        ln1_g: Tensor::full(vec![dim], F::one()),
        ln1_b: Tensor::zeros(vec![dim]),
        q_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        q_b: Tensor::zeros(vec![dim]),
        k_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        k_b: Tensor::zeros(vec![dim]),
        v_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        v_b: Tensor::zeros(vec![dim]),
        o_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        o_b: Tensor::zeros(vec![dim]),
        ln2_g: Tensor::full(vec![dim], F::one()),
        ln2_b: Tensor::zeros(vec![dim]),
        mlp1_w: normal_tensor(rng, vec![dim, hidden], INIT_STD),
        mlp1_b: Tensor::zeros(vec![hidden]),
        mlp2_w: normal_tensor(rng, vec![hidden, dim], INIT_STD),
        mlp2_b: Tensor::zeros(vec![dim]),
    }
}

fn init_grouping<F: Scalar>(rng: &mut RngStream, dim: usize, mlp_ratio: usize) -> GroupingP<Tensor<F>> {
    let hidden = dim * mlp_ratio;
    GroupingP {
        ln_g_g: Tensor::full(vec![dim], F::one()),
        ln_g_b: Tensor::zeros(vec![dim]),
        ln_p_g: Tensor::full(vec![dim], F::one()),
        ln_p_b: Tensor::zeros(vec![dim]),
        q_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        k_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        v_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        o_w: normal_tensor(rng, vec![dim, dim], INIT_STD),
        ln2_g: Tensor::full(vec![dim], F::one()),
        ln2_b: Tensor::zeros(vec![dim]),
        mlp1_w: normal_tensor(rng, vec![dim, hidden], INIT_STD),
        mlp1_b: Tensor::zeros(vec![hidden]),
        mlp2_w: normal_tensor(rng, vec![hidden, dim], INIT_STD),
        mlp2_b: Tensor::zeros(vec![dim]),
    }
}

impl<F: Scalar> EncoderParams<Tensor<F>> {
    pub fn init(cfg: &ModelConfig, vocab_size: usize, rng: &mut RngStream) -> Self {
        let d = cfg.dim;
        let n = cfg.n_patches();
        EncoderParams {
            patch_w: normal_tensor(rng, vec![cfg.patch_dim(), d], INIT_STD),
            patch_b: Tensor::zeros(vec![d]),
            pos_embed: normal_tensor(rng, vec![n, d], INIT_STD),
            group_tokens1: normal_tensor(rng, vec![cfg.s1, d], INIT_STD),
            group_tokens2: normal_tensor(rng, vec![cfg.s2, d], INIT_STD),
            ctx_layers: (0..cfg.contextual_layers)
                .map(|_| init_layer(rng, d, cfg.mlp_ratio))
                .collect(),
            prog_layers: (0..cfg.progressive_layers)
                .map(|_| init_layer(rng, d, cfg.mlp_ratio))
                .collect(),
            post1_layers: (0..cfg.post1_layers)
                .map(|_| init_layer(rng, d, cfg.mlp_ratio))
                .collect(),
            post2_layers: (0..cfg.post2_layers)
                .map(|_| init_layer(rng, d, cfg.mlp_ratio))
                .collect(),
            grouping1: init_grouping(rng, d, cfg.mlp_ratio),
            grouping2: init_grouping(rng, d, cfg.mlp_ratio),
            out_mlp: MlpP {
                w1: normal_tensor(rng, vec![d, d], INIT_STD),
                b1: Tensor::zeros(vec![d]),
                w2: normal_tensor(rng, vec![d, cfg.joint_dim], INIT_STD),
                b2: Tensor::zeros(vec![cfg.joint_dim]),
            },
            text: TextP {
                tok_embed: normal_tensor(rng, vec![vocab_size, cfg.text_dim], INIT_STD),
                pos_embed: normal_tensor(rng, vec![cfg.max_text_len, cfg.text_dim], INIT_STD),
                layers: (0..cfg.text_layers)
                    .map(|_| init_layer(rng, cfg.text_dim, cfg.mlp_ratio))
                    .collect(),
                ln_f_g: Tensor::full(vec![cfg.text_dim], F::one()),
                ln_f_b: Tensor::zeros(vec![cfg.text_dim]),
                proj: normal_tensor(rng, vec![cfg.text_dim, cfg.joint_dim], INIT_STD),
            },
            log_tau: Tensor::scalar(F::of(cfg.tau_init.ln())),
        }
    }

    /// Bind every tensor into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Result<EncoderParams<Var>> {
        self.try_map(&mut |t: &Tensor<F>| g.leaf(t.clone(), true))
    }

    /// Bind as frozen leaves (evaluation; no gradient bookkeeping).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Result<EncoderParams<Var>> {
        self.try_map(&mut |t: &Tensor<F>| g.leaf(t.clone(), false))
    }

    /// Clamp τ into its allowed range (applied after every optimizer step).
    pub fn clamp_tau(&mut self) {
        let lo = F::of(TAU_MIN.ln());
        let hi = F::of(TAU_MAX.ln());
        let v = self.log_tau.data()[0].max(lo).min(hi);
        self.log_tau.data_mut()[0] = v;
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].as_f64().exp()
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each(&mut |_, t| count += t.numel());
        count
    }

    /// Precision conversion (f32 training weights → f64 verification).
    pub fn cast<G: Scalar>(&self) -> EncoderParams<Tensor<G>> {
        self.try_map(&mut |t: &Tensor<F>| Ok(t.cast::<G>()))
            .expect("cast cannot fail")
    }
}
