//! Adam with decoupled weight decay and a warmup-cosine schedule.

use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

/// Decay applies to weight matrices and embeddings (rank ≥ 2) except the
/// positional embeddings and group tokens; norms, biases, and the
/// temperature stay undecayed (the usual ViT recipe).
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !matches!(name, "img.pos" | "img.group1" | "img.group2" | "txt.pos")
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One update. `t` is the 1-based step count for bias correction.
    pub fn update(
        &mut self,
        params: &mut EncoderParams<Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        t: u64,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        debug_assert!(t >= 1);
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let mut failure: Option<Error> = None;
        params.for_each_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = grads.get(name) else {
                failure = Some(Error::Numerical(format!("missing gradient for {name}")));
                return;
            };
            if grad.shape() != p.shape() {
                failure = Some(Error::shape(
                    "adam",
                    format!("{name}: grad {:?} vs param {:?}", grad.shape(), p.shape()),
                ));
                return;
            }
            if grad.find_non_finite().is_some() {
                failure = Some(Error::Numerical(format!("non-finite gradient for {name}")));
                return;
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let wd = if decays(name, p.rank()) { weight_decay } else { 0.0 };
            let gd = grad.data();
            let rank = p.rank();
            let _ = rank;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(gd)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = (*mv as f64) / bc1;
                let vhat = (*vv as f64) / bc2;
                let step = lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * (*pv as f64));
                *pv = (*pv as f64 - step) as f32;
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Linear warmup over `warmup_frac` of the run, then cosine decay to zero.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = ((total_steps as f64) * warmup_frac).ceil().max(1.0) as u64;
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;
    use crate::numerics::RngStream;

    #[test]
    fn schedule_shape() {
        let base = 3e-4;
        let total = 1000;
        let warm = 50;
        assert!(lr_at(0, total, base, 0.05) > 0.0);
        assert!(lr_at(0, total, base, 0.05) < base * 0.1);
        assert!((lr_at(warm - 1, total, base, 0.05) - base).abs() < 1e-12);
        assert!(lr_at(total - 1, total, base, 0.05) < base * 0.01);
        // monotone rise through warmup
        for s in 1..warm {
            assert!(lr_at(s, total, base, 0.05) >= lr_at(s - 1, total, base, 0.05));
        }
        // monotone fall after
        for s in warm + 1..total {
            assert!(lr_at(s, total, base, 0.05) <= lr_at(s - 1, total, base, 0.05));
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize mean((p - target)^2) over one real parameter tensor by
        // feeding analytic gradients; Adam should converge close to target.
        let cfg = ModelConfig::tiny();
        let mut params =
            EncoderParams::<Tensor<f32>>::init(&cfg, 23, &mut RngStream::new(3, "init"));
        let target = 0.37f32;
        let mut adam = Adam::new();
        for t in 1..=400u64 {
            let mut grads = BTreeMap::new();
            params.for_each(&mut |name, p| {
                let g = Tensor::new(
                    p.shape().to_vec(),
                    p.data().iter().map(|&v| 2.0 * (v - target)).collect(),
                )
                .unwrap();
                grads.insert(name.to_string(), g);
            });
            adam.update(&mut params, &grads, t, 0.01, 0.0).unwrap();
        }
        let mut max_err = 0f32;
        params.for_each(&mut |_, p| {
            for &v in p.data() {
                max_err = max_err.max((v - target).abs());
            }
        });
        assert!(max_err < 0.05, "max err {max_err}");
    }

    #[test]
    fn non_finite_gradients_abort() {
        let cfg = ModelConfig::tiny();
        let mut params =
            EncoderParams::<Tensor<f32>>::init(&cfg, 23, &mut RngStream::new(4, "init"));
        let mut grads = BTreeMap::new();
        params.for_each(&mut |name, p| {
            let mut g = Tensor::zeros(p.shape().to_vec());
            if name == "img.pos" {
                g.data_mut()[0] = f32::NAN;
            }
            grads.insert(name.to_string(), g);
        });
        let err = Adam::new().update(&mut params, &grads, 1, 1e-3, 0.0).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays("img.prog0.q.w", 2));
        assert!(decays("txt.tok", 2));
        assert!(!decays("img.pos", 2));
        assert!(!decays("img.group1", 2));
        assert!(!decays("img.prog0.ln1.g", 1));
        assert!(!decays("tau.log", 0));
        assert!(!decays("img.prog0.q.b", 1));
    }
}
