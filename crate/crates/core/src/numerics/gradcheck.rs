//! Central-difference verification of backward passes (64-bit only).

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check over one scalar-valued builder.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Number of entries compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} entries (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.checked,
            self.tolerance
        )?;
        if let Some((input, elem, a, n)) = self.worst {
            write!(f, "; worst input {input}[{elem}]: analytic {a:.6e} vs numeric {n:.6e}")?;
        }
        Ok(())
    }
}

/// Absolute floor below which an analytic/numeric pair counts as matching
/// regardless of relative error (kills noise around true zeros).
const ABS_FLOOR: f64 = 1e-8;

/// Compare backward gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every element of every input.
///
/// `build` must construct the same graph on every call (any randomness has
/// to be replayed) and return a scalar output node.
pub fn grad_check<B>(
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    mut build: B,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |build: &mut B, tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Numerical(format!(
                "grad_check: builder must return a scalar, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, vars, out))
    };

    // Analytic gradients.
    let (mut g, vars, out) = run(&mut build, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad")).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];

            perturbed[ti].data_mut()[ei] = orig + h;
            let (gp, _, op) = run(&mut build, &perturbed)?;
            let f_plus = gp.value(op).item();

            perturbed[ti].data_mut()[ei] = orig - h;
            let (gm, _, om) = run(&mut build, &perturbed)?;
            let f_minus = gm.value(om).item();

            perturbed[ti].data_mut()[ei] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let diff = (a - numeric).abs();
            report.checked += 1;
            if diff < ABS_FLOOR {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn rand_tensor(rng: &mut RngStream, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn sum_of_squares_matches_exactly() {
        let mut rng = RngStream::new(21, "gc");
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let report = grad_check(&[x], 1e-5, 1e-8, |g, vars| {
            let sq = g.mul(vars[0], vars[0])?;
            let s = g.mean_all(sq)?;
            g.scale(s, 12.0)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::full(vec![4], 2.0);
        let report = grad_check(&[x], 1e-5, 1e-8, |g, vars| {
            let _ = vars;
            g.scalar_const(3.25)?;
            // still must depend on the input for backward; multiply by zero
            let z = g.scale(vars[0], 0.0)?;
            g.mean_all(z)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![2]);
        let err = grad_check(&[x], 1e-5, 1e-4, |g, vars| g.add(vars[0], vars[0])).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn every_op_passes_randomized_grad_check() {
        let mut rng = RngStream::new(33, "gc-ops");
        let tol = 1e-4;
        let h = 1e-5;

        // matmul (batched, with broadcast rhs)
        let a = rand_tensor(&mut rng, vec![2, 3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let r = grad_check(&[a, b], h, tol, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.mean_all(y)
        })
        .unwrap();
        assert!(r.passed(), "matmul: {r}");

        // softmax + log_eps + mul mask
        let x = rand_tensor(&mut rng, vec![3, 5]);
        let r = grad_check(&[x], h, tol, |g, v| {
            let s = g.softmax(v[0], 1)?;
            let l = g.log_eps(s, 1e-8)?;
            g.mean_all(l)
        })
        .unwrap();
        assert!(r.passed(), "softmax∘log: {r}");

        // cross_entropy against a fixed one-hot target
        let p = Tensor::from_fn(vec![4, 3], |_| rng.uniform_range(0.05, 1.0));
        let r = grad_check(&[p], h, tol, |g, v| {
            let sm = g.softmax(v[0], 1)?; // keep p in (0,1)
            let mut qd = vec![0.0; 12];
            for row in 0..4 {
                qd[row * 3 + row % 3] = 1.0;
            }
            let q = g.constant(Tensor::new(vec![4, 3], qd)?)?;
            g.cross_entropy(sm, q, 1)
        })
        .unwrap();
        assert!(r.passed(), "cross_entropy: {r}");

        // layer_norm with affine
        let x = rand_tensor(&mut rng, vec![3, 6]);
        let gamma = rand_tensor(&mut rng, vec![6]);
        let beta = rand_tensor(&mut rng, vec![6]);
        let r = grad_check(&[x, gamma, beta], h, tol, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        })
        .unwrap();
        assert!(r.passed(), "layer_norm: {r}");

        // gelu (1e-4 via central differences at h=1e-5)
        let x = rand_tensor(&mut rng, vec![8]);
        let r = grad_check(&[x], h, tol, |g, v| {
            let y = g.gelu(v[0])?;
            g.mean_all(y)
        })
        .unwrap();
        assert!(r.passed(), "gelu: {r}");

        // l2_normalize
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let r = grad_check(&[x, w.clone()], h, tol, |g, v| {
            let y = g.l2_normalize(v[0])?;
            let p = g.mul(y, v[1])?;
            g.mean_all(p)
        })
        .unwrap();
        assert!(r.passed(), "l2_normalize: {r}");

        // transpose2 / slice / concat plumbing
        let x = rand_tensor(&mut rng, vec![4, 5]);
        let r = grad_check(&[x], h, tol, |g, v| {
            let t = g.transpose2(v[0])?;
            let left = g.slice_cols(t, 0, 2)?;
            let right = g.slice_cols(t, 2, 4)?;
            let cat = g.concat_cols(&[right, left])?;
            let rows = g.slice_rows(cat, 1, 4)?;
            let sq = g.mul(rows, rows)?;
            g.mean_all(sq)
        })
        .unwrap();
        assert!(r.passed(), "shape ops: {r}");

        // embed_lookup
        let table = rand_tensor(&mut rng, vec![7, 3]);
        let r = grad_check(&[table], h, tol, |g, v| {
            let e = g.embed_lookup(v[0], &[1, 4, 4, 6])?;
            let sq = g.mul(e, e)?;
            g.mean_all(sq)
        })
        .unwrap();
        assert!(r.passed(), "embed_lookup: {r}");

        // gather_outer
        let x = rand_tensor(&mut rng, vec![3, 4, 2]);
        let r = grad_check(&[x], h, tol, |g, v| {
            let y = g.gather_outer(v[0], &[2, 0, 1, 1, 1, 2, 0, 0, 0, 1, 2, 2])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        })
        .unwrap();
        assert!(r.passed(), "gather_outer: {r}");

        // div_rows
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let denom = Tensor::from_fn(vec![3], |_| rng.uniform_range(0.5, 2.0));
        let r = grad_check(&[a, denom], h, tol, |g, v| {
            let y = g.div_rows(v[0], v[1], 1e-6)?;
            g.mean_all(y)
        })
        .unwrap();
        assert!(r.passed(), "div_rows: {r}");

        // scale_by + exp + recip + clamp + neg + sub
        let a = rand_tensor(&mut rng, vec![4]);
        let s = Tensor::new(vec![1], vec![0.7]).unwrap();
        let r = grad_check(&[a, s], h, tol, |g, v| {
            let e = g.exp(v[1])?;
            let rc = g.recip(e)?;
            let y = g.scale_by(v[0], rc)?;
            let c = g.clamp(y, -10.0, 10.0)?;
            let n = g.neg(c)?;
            let z = g.sub(v[0], n)?;
            g.mean_all(z)
        })
        .unwrap();
        assert!(r.passed(), "scalar plumbing: {r}");

        // stack0 / index0 / sum_axis / add_bcast
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 3]);
        let bias = rand_tensor(&mut rng, vec![3]);
        let r = grad_check(&[a, b, bias], h, tol, |g, v| {
            let st = g.stack0(&[v[0], v[1]])?;
            let first = g.index0(st, 0)?;
            let biased = g.add_bcast(first, v[2])?;
            let summed = g.sum_axis(biased, 0)?;
            let sq = g.mul(summed, summed)?;
            g.mean_all(sq)
        })
        .unwrap();
        assert!(r.passed(), "stack/index/sum: {r}");

        // gumbel ST in soft mode composes with downstream ops
        let logits = rand_tensor(&mut rng, vec![4, 3]);
        let r = grad_check(&[logits], h, tol, |g, v| {
            let y = g.gumbel_softmax_st(v[0], 1, 0.9, None, false)?;
            let l = g.log_eps(y, 1e-8)?;
            g.mean_all(l)
        })
        .unwrap();
        assert!(r.passed(), "gumbel soft: {r}");
    }
}
