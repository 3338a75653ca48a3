//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation records a node holding its output tensor; `backward` from
//! a scalar replays the tape in reverse. The graph is rebuilt each training
//! step because the mixing permutation is data-dependent.
//!
//! Every forward output is scanned for NaN/Inf; a non-finite value aborts
//! with the offending node identified instead of propagating.

use super::kernels;
use super::rng::RngStream;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add { a: usize, b: usize },
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading axes.
    AddBcast { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    Neg { a: usize },
    Exp { a: usize },
    Recip { a: usize },
    LogEps { a: usize, eps: F },
    Clamp { a: usize, lo: F, hi: F },
    /// Multiply by a one-element tensor (e.g. 1/τ).
    ScaleByVar { a: usize, s: usize },
    Matmul { a: usize, b: usize },
    Transpose2 { a: usize },
    Softmax { a: usize, axis: usize },
    CrossEntropy { p: usize, q: usize, axis: usize, eps: F },
    /// Forward is one-hot argmax (or the soft relaxation when `hard` is
    /// false); backward is always the tempered-softmax gradient.
    GumbelSoftmaxSt { logits: usize, axis: usize, temp: F, hard: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: F },
    Gelu { a: usize },
    L2NormRows { a: usize, eps: F },
    MeanAll { a: usize },
    SumAxis { a: usize, axis: usize },
    Concat0 { parts: Vec<usize> },
    Stack0 { parts: Vec<usize> },
    Index0 { a: usize, idx: usize },
    SliceRows { a: usize, lo: usize, hi: usize },
    SliceCols { a: usize, lo: usize, hi: usize },
    ConcatCols { parts: Vec<usize> },
    Reshape { a: usize },
    EmbedLookup { table: usize, ids: Vec<usize> },
    /// out[g, i, :] = a[src[g*n + i], i, :]
    GatherOuter { a: usize, src: Vec<usize> },
    /// out[r, c] = a[r, c] / (denom[r] + eps)
    DivRows { a: usize, denom: usize, eps: F },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::AddBcast { .. } => "add_bcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Neg { .. } => "neg",
            Op::Exp { .. } => "exp",
            Op::Recip { .. } => "recip",
            Op::LogEps { .. } => "log_eps",
            Op::Clamp { .. } => "clamp",
            Op::ScaleByVar { .. } => "scale_by_var",
            Op::Matmul { .. } => "matmul",
            Op::Transpose2 { .. } => "transpose2",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GumbelSoftmaxSt { .. } => "gumbel_softmax_st",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::L2NormRows { .. } => "l2_normalize",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat0 { .. } => "concat0",
            Op::Stack0 { .. } => "stack0",
            Op::Index0 { .. } => "index0",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Reshape { .. } => "reshape",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::GatherOuter { .. } => "gather_outer",
            Op::DivRows { .. } => "div_rows",
        }
    }
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    /// Auxiliary tensors kept for backward (soft probabilities, norms, …).
    saved: Vec<Tensor<F>>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Dynamic computation tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Row/lane decomposition of a shape around one axis.
#[derive(Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

fn lanes(shape: &[usize], axis: usize) -> Lanes {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Lanes { outer, len, inner }
}

impl Lanes {
    /// Visit every lane: `f(base_offset, stride)`; elements of the lane sit
    /// at `base + j * stride` for `j in 0..len`.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        kernels::init_parallelism();
        Graph { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` (present after `backward` for every
    /// reachable node with `requires_grad`).
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ── node plumbing ───────────────────────────────────────────────────

    fn push(&mut self, op: Op<F>, value: Tensor<F>, saved: Vec<Tensor<F>>) -> Result<Var> {
        let requires_grad = match &op {
            Op::Leaf => false, // overridden by `leaf`
            _ => self.op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.push_with_grad(op, value, saved, requires_grad)
    }

    fn push_with_grad(
        &mut self,
        op: Op<F>,
        value: Tensor<F>,
        saved: Vec<Tensor<F>>,
        requires_grad: bool,
    ) -> Result<Var> {
        let id = self.nodes.len();
        if let Some(pos) = value.find_non_finite() {
            let _ = pos;
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn op_inputs(&self, op: &Op<F>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add { a, b }
            | Op::AddBcast { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Matmul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Neg { a }
            | Op::Exp { a }
            | Op::Recip { a }
            | Op::LogEps { a, .. }
            | Op::Clamp { a, .. }
            | Op::Transpose2 { a }
            | Op::Softmax { a, .. }
            | Op::Gelu { a }
            | Op::L2NormRows { a, .. }
            | Op::MeanAll { a }
            | Op::SumAxis { a, .. }
            | Op::Index0 { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a }
            | Op::GatherOuter { a, .. } => vec![*a],
            Op::ScaleByVar { a, s } => vec![*a, *s],
            Op::CrossEntropy { p, q, .. } => vec![*p, *q],
            Op::GumbelSoftmaxSt { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat0 { parts } | Op::Stack0 { parts } | Op::ConcatCols { parts } => {
                parts.clone()
            }
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::DivRows { a, denom, .. } => vec![*a, *denom],
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Register an input tensor. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push_with_grad(Op::Leaf, value, vec![], requires_grad)
    }

    /// Non-trainable input (masks, targets, raw data).
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(F::of(v)))
    }

    // ── element-wise ────────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(self.nodes[b.0].value.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        self.push(Op::Add { a: a.0, b: b.0 }, value, vec![])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias addition).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < sb.len() || !sa.ends_with(&sb) {
            return Err(Error::shape(
                "add_bcast",
                format!("{:?} vs suffix {:?}", sa, sb),
            ));
        }
        let bn = self.nodes[b.0].value.numel().max(1);
        let bd = self.nodes[b.0].value.data();
        let data: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bn])
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(Op::AddBcast { a: a.0, b: b.0 }, value, vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(self.nodes[b.0].value.data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        self.push(Op::Sub { a: a.0, b: b.0 }, value, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(self.nodes[b.0].value.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        self.push(Op::Mul { a: a.0, b: b.0 }, value, vec![])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::of(c);
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale { a: a.0, c }, value, vec![])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg { a: a.0 }, value, vec![])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        self.push(Op::Exp { a: a.0 }, value, vec![])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| F::one() / x);
        self.push(Op::Recip { a: a.0 }, value, vec![])
    }

    /// `ln(max(x, eps))` — the log used inside every loss term.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let eps = F::of(eps);
        let value = self.nodes[a.0].value.map(|x| x.max(eps).ln());
        self.push(Op::LogEps { a: a.0, eps }, value, vec![])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (F::of(lo), F::of(hi));
        let value = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { a: a.0, lo, hi }, value, vec![])
    }

    /// Multiply a tensor by a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::shape(
                "scale_by_var",
                format!("scale operand must be one element, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let value = self.nodes[a.0].value.map(|x| x * sv);
        self.push(Op::ScaleByVar { a: a.0, s: s.0 }, value, vec![])
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product with optional leading batch axis on either side:
    /// `[m,k]×[k,n]`, `[B,m,k]×[B,k,n]`, `[B,m,k]×[k,n]`, `[m,k]×[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims("matmul", &sa, &sb)?;
        let MatmulDims { batch, m, k, n, a_batched, b_batched } = dims;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for t in 0..batch {
                let asl = if a_batched { &ad[t * m * k..(t + 1) * m * k] } else { ad };
                let bsl = if b_batched { &bd[t * k * n..(t + 1) * k * n] } else { bd };
                kernels::matmul(asl, bsl, &mut out[t * m * n..(t + 1) * m * n], m, k, n);
            }
        }
        let out_shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::Matmul { a: a.0, b: b.0 }, value, vec![])
    }

    /// Swap the last two axes (rank 2 or 3).
    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("transpose2", format!("rank {} < 2", sa.len())));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![F::zero(); ad.len()];
        for t in 0..batch {
            let src = &ad[t * r * c..(t + 1) * r * c];
            let dst = &mut out[t * r * c..(t + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = sa.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let value = Tensor::new(shape, out)?;
        self.push(Op::Transpose2 { a: a.0 }, value, vec![])
    }

    // ── nonlinearities and normalizations ───────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid or empty for shape {:?}", shape),
            ));
        }
        let ln = lanes(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![F::zero(); src.len()];
        ln.for_each(|base, stride| {
            let mut max = F::neg_infinity();
            for j in 0..ln.len {
                max = max.max(src[base + j * stride]);
            }
            let mut sum = F::zero();
            for j in 0..ln.len {
                let e = (src[base + j * stride] - max).exp();
                out[base + j * stride] = e;
                sum = sum + e;
            }
            for j in 0..ln.len {
                out[base + j * stride] = out[base + j * stride] / sum;
            }
        });
        let value = Tensor::new(shape, out)?;
        self.push(Op::Softmax { a: a.0, axis }, value, vec![])
    }

    /// Mean over all non-`axis` positions of `-Σ q·ln(max(p, eps))`.
    /// `q` is expected to be one-hot along `axis`.
    pub fn cross_entropy(&mut self, p: Var, q: Var, axis: usize) -> Result<Var> {
        const CE_EPS: f64 = 1e-8;
        self.check_same_shape("cross_entropy", p, q)?;
        let shape = self.shape(p).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("axis {axis} invalid for shape {:?}", shape),
            ));
        }
        let eps = F::of(CE_EPS);
        let rows = self.nodes[p.0].value.numel() / shape[axis];
        let pd = self.nodes[p.0].value.data();
        let qd = self.nodes[q.0].value.data();
        let mut total = F::zero();
        for (pv, qv) in pd.iter().zip(qd) {
            if *qv != F::zero() {
                total = total - *qv * pv.max(eps).ln();
            }
        }
        let value = Tensor::scalar(total / F::of(rows as f64));
        self.push(Op::CrossEntropy { p: p.0, q: q.0, axis, eps }, value, vec![])
    }

    /// Straight-through Gumbel softmax along `axis`.
    ///
    /// Forward output is exactly one-hot per lane (argmax of the tempered,
    /// optionally noised logits); backward applies the gradient of the soft
    /// relaxation. With `rng = None` the noise is disabled and the argmax is
    /// deterministic. `hard = false` (used by gradient verification) makes
    /// the forward output the relaxation itself.
    pub fn gumbel_softmax_st(
        &mut self,
        logits: Var,
        axis: usize,
        temperature: f64,
        rng: Option<&mut RngStream>,
        hard: bool,
    ) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Numerical(format!(
                "gumbel_softmax_st: temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(logits).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "gumbel_softmax_st",
                format!("axis {axis} invalid for shape {:?}", shape),
            ));
        }
        let temp = F::of(temperature);
        let src = self.nodes[logits.0].value.data();
        let mut z: Vec<F> = src.iter().map(|&x| x / temp).collect();
        if let Some(rng) = rng {
            // Noise is drawn in flat element order so the stream advances
            // identically regardless of axis.
            for v in z.iter_mut() {
                *v = *v + F::of(rng.gumbel()) / temp;
            }
        }
        let ln = lanes(&shape, axis);
        let mut soft = vec![F::zero(); z.len()];
        let mut out = vec![F::zero(); z.len()];
        ln.for_each(|base, stride| {
            let mut max = F::neg_infinity();
            let mut arg = 0usize;
            for j in 0..ln.len {
                let v = z[base + j * stride];
                if v > max {
                    max = v;
                    arg = j;
                }
            }
            let mut sum = F::zero();
            for j in 0..ln.len {
                let e = (z[base + j * stride] - max).exp();
                soft[base + j * stride] = e;
                sum = sum + e;
            }
            for j in 0..ln.len {
                soft[base + j * stride] = soft[base + j * stride] / sum;
            }
            if hard {
                out[base + arg * stride] = F::one();
            }
        });
        if !hard {
            out.copy_from_slice(&soft);
        }
        let soft = Tensor::new(shape.clone(), soft)?;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::GumbelSoftmaxSt { logits: logits.0, axis, temp, hard },
            value,
            vec![soft],
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const LN_EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{c}] for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    shape
                ),
            ));
        }
        let eps = F::of(LN_EPS);
        let rows = self.nodes[x.0].value.numel() / c;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        let cn = F::of(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / cn;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / cn;
            let iv = F::one() / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..c {
                let h = (row[j] - mean) * iv;
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let inv = Tensor::new(vec![rows], inv)?;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            value,
            vec![xhat, inv],
        )
    }

    /// Exact GELU: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let half = F::of(0.5);
        let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.nodes[a.0]
            .value
            .map(|x| half * x * (F::one() + (x * inv_sqrt2).erf()));
        self.push(Op::Gelu { a: a.0 }, value, vec![])
    }

    /// Normalize the last axis to unit Euclidean norm with an epsilon floor.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        const L2_EPS: f64 = 1e-12;
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "rank 0"))?;
        let eps = F::of(L2_EPS);
        let rows = self.nodes[a.0].value.numel() / c;
        let ad = self.nodes[a.0].value.data();
        let mut norms = vec![F::zero(); rows];
        let mut out = vec![F::zero(); ad.len()];
        for r in 0..rows {
            let row = &ad[r * c..(r + 1) * c];
            let mut sq = F::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let n = sq.sqrt();
            norms[r] = n;
            if n < eps && cfg!(debug_assertions) {
                log::warn!("l2_normalize: zero-norm vector floored by epsilon");
            }
            let nf = n.max(eps);
            for j in 0..c {
                out[r * c + j] = row[j] / nf;
            }
        }
        let norms = Tensor::new(vec![rows], norms)?;
        let value = Tensor::new(shape, out)?;
        self.push(Op::L2NormRows { a: a.0, eps }, value, vec![norms])
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let value = Tensor::scalar(acc / F::of(n as f64));
        self.push(Op::MeanAll { a: a.0 }, value, vec![])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} invalid for {:?}", shape),
            ));
        }
        let ln = lanes(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![F::zero(); ln.outer * ln.inner];
        let mut w = 0usize;
        ln.for_each(|base, stride| {
            let mut acc = F::zero();
            for j in 0..ln.len {
                acc = acc + src[base + j * stride];
            }
            out[w] = acc;
            w += 1;
        });
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::SumAxis { a: a.0, axis }, value, vec![])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a)[axis];
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    // ── shape surgery ───────────────────────────────────────────────────

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat0", "no parts"));
        }
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::shape(
                    "concat0",
                    format!("incompatible part shape {:?} (trailing {:?})", s, rest),
                ));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * rest.iter().product::<usize>().max(1));
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&rest);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Concat0 { parts: parts.iter().map(|v| v.0).collect() }, value, vec![])
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack0", "no parts"));
        }
        let inner = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != inner {
                return Err(Error::shape(
                    "stack0",
                    format!("{:?} vs {:?}", self.shape(p), inner),
                ));
            }
        }
        let mut data = Vec::with_capacity(parts.len() * self.nodes[parts[0].0].value.numel());
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Stack0 { parts: parts.iter().map(|v| v.0).collect() }, value, vec![])
    }

    /// Select sub-tensor `a[idx]` along axis 0 (rank drops by one).
    pub fn index0(&mut self, a: Var, idx: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx >= shape[0] {
            return Err(Error::shape(
                "index0",
                format!("index {idx} out of bounds for {:?}", shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.nodes[a.0].value.data()[idx * inner..(idx + 1) * inner].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        self.push(Op::Index0 { a: a.0, idx }, value, vec![])
    }

    /// Slice `lo..hi` along axis 0.
    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || lo >= hi || hi > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("range {lo}..{hi} invalid for {:?}", shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.nodes[a.0].value.data()[lo * inner..hi * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = hi - lo;
        let value = Tensor::new(out_shape, data)?;
        self.push(Op::SliceRows { a: a.0, lo, hi }, value, vec![])
    }

    /// Slice `lo..hi` along the last axis.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("slice_cols", "rank 0"))?;
        if lo >= hi || hi > c {
            return Err(Error::shape(
                "slice_cols",
                format!("range {lo}..{hi} invalid for {:?}", shape),
            ));
        }
        let rows = self.nodes[a.0].value.numel() / c;
        let src = self.nodes[a.0].value.data();
        let w = hi - lo;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + lo..r * c + hi]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w;
        let value = Tensor::new(out_shape, data)?;
        self.push(Op::SliceCols { a: a.0, lo, hi }, value, vec![])
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_cols",
                    format!("incompatible part shape {:?} (leading {:?})", s, lead),
                ));
            }
            total_c += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut data = vec![F::zero(); rows * total_c];
        let mut col0 = 0;
        for &p in parts {
            let s = self.shape(p);
            let c = s[s.len() - 1];
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total_c + col0..r * total_c + col0 + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            col0 += c;
        }
        let mut shape = lead;
        shape.push(total_c);
        let value = Tensor::new(shape, data)?;
        self.push(Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() }, value, vec![])
    }

    /// View with a new shape (element count preserved).
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let value = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        self.push(Op::Reshape { a: a.0 }, value, vec![])
    }

    // ── indexed gathers ─────────────────────────────────────────────────

    /// Row lookup into an embedding table `[V, d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "embed_lookup",
                format!("table must be rank 2, got {:?}", shape),
            ));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embed_lookup",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(Op::EmbedLookup { table: table.0, ids: ids.to_vec() }, value, vec![])
    }

    /// Per-position gather along the outer axis of `[M, N, d]`:
    /// `out[g, i, :] = a[src[g*N + i], i, :]`. The gradient scatters back.
    pub fn gather_outer(&mut self, a: Var, src: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "gather_outer",
                format!("input must be rank 3, got {:?}", shape),
            ));
        }
        let (m, n, d) = (shape[0], shape[1], shape[2]);
        if src.len() % n != 0 {
            return Err(Error::shape(
                "gather_outer",
                format!("source length {} not a multiple of position count {n}", src.len()),
            ));
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= m) {
            return Err(Error::shape(
                "gather_outer",
                format!("source index {bad} out of range for outer size {m}"),
            ));
        }
        let g = src.len() / n;
        let ad = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(g * n * d);
        for (gi, &s) in src.iter().enumerate() {
            let i = gi % n;
            data.extend_from_slice(&ad[(s * n + i) * d..(s * n + i + 1) * d]);
        }
        let value = Tensor::new(vec![g, n, d], data)?;
        self.push(Op::GatherOuter { a: a.0, src: src.to_vec() }, value, vec![])
    }

    /// `out[r, c] = a[r, c] / (denom[r] + eps)` — assignment-count mean.
    pub fn div_rows(&mut self, a: Var, denom: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("div_rows", format!("lhs must be rank 2, got {:?}", shape)));
        }
        let r = shape[0];
        let dn = self.shape(denom).to_vec();
        if !(dn == [r] || dn == [r, 1]) {
            return Err(Error::shape(
                "div_rows",
                format!("denominator {:?} must be [{r}] or [{r},1]", dn),
            ));
        }
        let eps = F::of(eps);
        let c = shape[1];
        let ad = self.nodes[a.0].value.data();
        let dd = self.nodes[denom.0].value.data();
        let mut out = vec![F::zero(); ad.len()];
        for i in 0..r {
            let inv = F::one() / (dd[i] + eps);
            for j in 0..c {
                out[i * c + j] = ad[i * c + j] * inv;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::DivRows { a: a.0, denom: denom.0, eps }, value, vec![])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Gradients of `requires_grad` leaves
    /// are retained; intermediate gradients are freed as soon as consumed.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.nodes[target.0].value.numel() != 1 {
            return Err(Error::Numerical(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(target)
            )));
        }
        if !self.nodes[target.0].requires_grad {
            return Err(Error::Numerical(
                "backward target does not depend on any trainable leaf".into(),
            ));
        }
        self.nodes[target.0].grad = Some(vec![F::one()]);
        for id in (0..=target.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[id].grad.take().expect("grad present");
            self.backward_op(id, &op, &grad)?;
        }
        // Reachable-but-unused trainable leaves get explicit zero gradients.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![F::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    /// Borrow the gradient buffer of node `id` (allocating zeros on first
    /// touch), hand it to `f` together with an immutable view of the graph.
    fn with_grad_buf(&mut self, id: usize, f: impl FnOnce(&Graph<F>, &mut [F])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let mut buf = match self.nodes[id].grad.take() {
            Some(g) => g,
            None => vec![F::zero(); self.nodes[id].value.numel()],
        };
        f(self, &mut buf);
        self.nodes[id].grad = Some(buf);
    }

    fn values(&self, id: usize) -> &[F] {
        self.nodes[id].value.data()
    }

    fn backward_op(&mut self, id: usize, op: &Op<F>, d: &[F]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
                self.with_grad_buf(b, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
            }
            Op::AddBcast { a, b } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
                self.with_grad_buf(b, |_, g| {
                    let bn = g.len().max(1);
                    for (i, &di) in d.iter().enumerate() {
                        g[i % bn] = g[i % bn] + di;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
                self.with_grad_buf(b, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi - di;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.with_grad_buf(a, |gr, g| {
                    let bv = gr.values(b);
                    for ((gi, &di), &bi) in g.iter_mut().zip(d).zip(bv) {
                        *gi = *gi + di * bi;
                    }
                });
                self.with_grad_buf(b, |gr, g| {
                    let av = gr.values(a);
                    for ((gi, &di), &ai) in g.iter_mut().zip(d).zip(av) {
                        *gi = *gi + di * ai;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di * c;
                    }
                });
            }
            Op::Neg { a } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi - di;
                    }
                });
            }
            Op::Exp { a } => {
                let y = self.nodes[id].value.data().to_vec();
                self.with_grad_buf(a, |_, g| {
                    for ((gi, &di), &yi) in g.iter_mut().zip(d).zip(&y) {
                        *gi = *gi + di * yi;
                    }
                });
            }
            Op::Recip { a } => {
                let y = self.nodes[id].value.data().to_vec();
                self.with_grad_buf(a, |_, g| {
                    for ((gi, &di), &yi) in g.iter_mut().zip(d).zip(&y) {
                        *gi = *gi - di * yi * yi;
                    }
                });
            }
            Op::LogEps { a, eps } => {
                self.with_grad_buf(a, |gr, g| {
                    let xv = gr.values(a);
                    for ((gi, &di), &xi) in g.iter_mut().zip(d).zip(xv) {
                        if xi >= eps {
                            *gi = *gi + di / xi;
                        }
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                self.with_grad_buf(a, |gr, g| {
                    let xv = gr.values(a);
                    for ((gi, &di), &xi) in g.iter_mut().zip(d).zip(xv) {
                        if xi > lo && xi < hi {
                            *gi = *gi + di;
                        }
                    }
                });
            }
            Op::ScaleByVar { a, s } => {
                let sv = self.values(s)[0];
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di * sv;
                    }
                });
                self.with_grad_buf(s, |gr, g| {
                    let av = gr.values(a);
                    let mut acc = F::zero();
                    for (&di, &ai) in d.iter().zip(av) {
                        acc = acc + di * ai;
                    }
                    g[0] = g[0] + acc;
                });
            }
            Op::Matmul { a, b } => {
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let dims = matmul_dims("matmul", &sa, &sb).expect("validated in forward");
                let MatmulDims { batch, m, k, n, a_batched, b_batched } = dims;
                // dA = dOut · Bᵀ
                self.with_grad_buf(a, |gr, g| {
                    let bd = gr.values(b);
                    for t in 0..batch {
                        let dsl = &d[t * m * n..(t + 1) * m * n];
                        let bsl = if b_batched { &bd[t * k * n..(t + 1) * k * n] } else { bd };
                        let gsl = if a_batched {
                            &mut g[t * m * k..(t + 1) * m * k]
                        } else {
                            &mut g[..]
                        };
                        kernels::matmul_bt(dsl, bsl, gsl, m, k, n);
                    }
                });
                // dB = Aᵀ · dOut
                self.with_grad_buf(b, |gr, g| {
                    let ad = gr.values(a);
                    for t in 0..batch {
                        let dsl = &d[t * m * n..(t + 1) * m * n];
                        let asl = if a_batched { &ad[t * m * k..(t + 1) * m * k] } else { ad };
                        let gsl = if b_batched {
                            &mut g[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut g[..]
                        };
                        kernels::matmul_at(asl, dsl, gsl, m, k, n);
                    }
                });
            }
            Op::Transpose2 { a } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch: usize = shape[..shape.len() - 2].iter().product();
                self.with_grad_buf(a, |_, g| {
                    for t in 0..batch {
                        let dsl = &d[t * r * c..(t + 1) * r * c];
                        let gsl = &mut g[t * r * c..(t + 1) * r * c];
                        // output (r×c) is the transpose of input (c×r)
                        for i in 0..r {
                            for j in 0..c {
                                gsl[j * r + i] = gsl[j * r + i] + dsl[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[id].value.data().to_vec();
                let shape = self.nodes[id].value.shape().to_vec();
                let ln = lanes(&shape, axis);
                self.with_grad_buf(a, |_, g| {
                    ln.for_each(|base, stride| {
                        let mut dot = F::zero();
                        for j in 0..ln.len {
                            let k = base + j * stride;
                            dot = dot + d[k] * y[k];
                        }
                        for j in 0..ln.len {
                            let k = base + j * stride;
                            g[k] = g[k] + y[k] * (d[k] - dot);
                        }
                    });
                });
            }
            Op::CrossEntropy { p, q, axis, eps } => {
                let shape = self.nodes[p].value.shape().to_vec();
                let rows = shape.iter().product::<usize>() / shape[axis];
                let scale = d[0] / F::of(rows as f64);
                self.with_grad_buf(p, |gr, g| {
                    let pv = gr.values(p);
                    let qv = gr.values(q);
                    for i in 0..pv.len() {
                        if qv[i] != F::zero() && pv[i] >= eps {
                            g[i] = g[i] - scale * qv[i] / pv[i];
                        }
                    }
                });
                self.with_grad_buf(q, |gr, g| {
                    let pv = gr.values(p);
                    for i in 0..pv.len() {
                        g[i] = g[i] - scale * pv[i].max(eps).ln();
                    }
                });
            }
            Op::GumbelSoftmaxSt { logits, axis, temp, .. } => {
                let soft = self.nodes[id].saved[0].data().to_vec();
                let shape = self.nodes[id].value.shape().to_vec();
                let ln = lanes(&shape, axis);
                self.with_grad_buf(logits, |_, g| {
                    ln.for_each(|base, stride| {
                        let mut dot = F::zero();
                        for j in 0..ln.len {
                            let k = base + j * stride;
                            dot = dot + d[k] * soft[k];
                        }
                        for j in 0..ln.len {
                            let k = base + j * stride;
                            g[k] = g[k] + soft[k] * (d[k] - dot) / temp;
                        }
                    });
                });
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let xhat = self.nodes[id].saved[0].data().to_vec();
                let inv = self.nodes[id].saved[1].data().to_vec();
                let c = *self.nodes[id].value.shape().last().unwrap();
                let rows = xhat.len() / c;
                let cn = F::of(c as f64);
                self.with_grad_buf(x, |gr, g| {
                    let gd = gr.values(gamma);
                    for r in 0..rows {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..c {
                            let k = r * c + j;
                            let dxh = d[k] * gd[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xhat[k];
                        }
                        mean_dxh = mean_dxh / cn;
                        mean_dxh_xh = mean_dxh_xh / cn;
                        for j in 0..c {
                            let k = r * c + j;
                            let dxh = d[k] * gd[j];
                            g[k] = g[k] + inv[r] * (dxh - mean_dxh - xhat[k] * mean_dxh_xh);
                        }
                    }
                });
                self.with_grad_buf(gamma, |_, g| {
                    for r in 0..rows {
                        for j in 0..c {
                            let k = r * c + j;
                            g[j] = g[j] + d[k] * xhat[k];
                        }
                    }
                });
                self.with_grad_buf(beta, |_, g| {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] = g[j] + d[r * c + j];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let half = F::of(0.5);
                let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.with_grad_buf(a, |gr, g| {
                    let xv = gr.values(a);
                    for ((gi, &di), &x) in g.iter_mut().zip(d).zip(xv) {
                        let cdf = half * (F::one() + (x * inv_sqrt2).erf());
                        let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                        *gi = *gi + di * (cdf + x * pdf);
                    }
                });
            }
            Op::L2NormRows { a, eps } => {
                let norms = self.nodes[id].saved[0].data().to_vec();
                let y = self.nodes[id].value.data().to_vec();
                let c = *self.nodes[id].value.shape().last().unwrap();
                let rows = norms.len();
                self.with_grad_buf(a, |_, g| {
                    for r in 0..rows {
                        let nf = norms[r].max(eps);
                        if norms[r] < eps {
                            // floored: y = x/eps is linear
                            for j in 0..c {
                                let k = r * c + j;
                                g[k] = g[k] + d[k] / eps;
                            }
                        } else {
                            let mut dot = F::zero();
                            for j in 0..c {
                                let k = r * c + j;
                                dot = dot + d[k] * y[k];
                            }
                            for j in 0..c {
                                let k = r * c + j;
                                g[k] = g[k] + (d[k] - y[k] * dot) / nf;
                            }
                        }
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a].value.numel();
                let scale = d[0] / F::of(n as f64);
                self.with_grad_buf(a, |_, g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + scale;
                    }
                });
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ln = lanes(&shape, axis);
                self.with_grad_buf(a, |_, g| {
                    let mut w = 0usize;
                    ln.for_each(|base, stride| {
                        for j in 0..ln.len {
                            g[base + j * stride] = g[base + j * stride] + d[w];
                        }
                        w += 1;
                    });
                });
            }
            Op::Concat0 { ref parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    self.with_grad_buf(p, |_, g| {
                        for (gi, &di) in g.iter_mut().zip(&d[off..off + n]) {
                            *gi = *gi + di;
                        }
                    });
                    off += n;
                }
            }
            Op::Stack0 { ref parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    self.with_grad_buf(p, |_, g| {
                        for (gi, &di) in g.iter_mut().zip(&d[off..off + n]) {
                            *gi = *gi + di;
                        }
                    });
                    off += n;
                }
            }
            Op::Index0 { a, idx } => {
                let inner = self.nodes[id].value.numel();
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g[idx * inner..(idx + 1) * inner].iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
            }
            Op::SliceRows { a, lo, hi } => {
                let inner: usize = self.nodes[a].value.shape()[1..].iter().product();
                let _ = hi;
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g[lo * inner..].iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
            }
            Op::SliceCols { a, lo, hi } => {
                let c = *self.nodes[a].value.shape().last().unwrap();
                let w = hi - lo;
                let rows = self.nodes[a].value.numel() / c;
                self.with_grad_buf(a, |_, g| {
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * c + lo + j] = g[r * c + lo + j] + d[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { ref parts } => {
                let total_c = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.numel() / total_c;
                let mut col0 = 0;
                for &p in parts {
                    let c = *self.nodes[p].value.shape().last().unwrap();
                    self.with_grad_buf(p, |_, g| {
                        for r in 0..rows {
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + d[r * total_c + col0 + j];
                            }
                        }
                    });
                    col0 += c;
                }
            }
            Op::Reshape { a } => {
                self.with_grad_buf(a, |_, g| {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi = *gi + di;
                    }
                });
            }
            Op::EmbedLookup { table, ref ids } => {
                let dcols = self.nodes[id].value.shape()[1];
                self.with_grad_buf(table, |_, g| {
                    for (row, &tid) in ids.iter().enumerate() {
                        for j in 0..dcols {
                            g[tid * dcols + j] = g[tid * dcols + j] + d[row * dcols + j];
                        }
                    }
                });
            }
            Op::GatherOuter { a, ref src } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let (n, dcols) = (shape[1], shape[2]);
                self.with_grad_buf(a, |_, g| {
                    for (gi, &s) in src.iter().enumerate() {
                        let i = gi % n;
                        let dst = (s * n + i) * dcols;
                        for j in 0..dcols {
                            g[dst + j] = g[dst + j] + d[gi * dcols + j];
                        }
                    }
                });
            }
            Op::DivRows { a, denom, eps } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                self.with_grad_buf(a, |gr, g| {
                    let dd = gr.values(denom);
                    for i in 0..r {
                        let inv = F::one() / (dd[i] + eps);
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + d[i * c + j] * inv;
                        }
                    }
                });
                self.with_grad_buf(denom, |gr, g| {
                    let av = gr.values(a);
                    let dd = gr.values(denom);
                    for i in 0..r {
                        let inv = F::one() / (dd[i] + eps);
                        let mut acc = F::zero();
                        for j in 0..c {
                            acc = acc + d[i * c + j] * av[i * c + j];
                        }
                        g[i] = g[i] - acc * inv * inv;
                    }
                });
            }
        }
        Ok(())
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<MatmulDims> {
    let err = || Error::shape(op, format!("{:?} x {:?}", sa, sb));
    let (a_batched, b_batched) = match (sa.len(), sb.len()) {
        (2, 2) => (false, false),
        (3, 3) => (true, true),
        (3, 2) => (true, false),
        (2, 3) => (false, true),
        _ => return Err(err()),
    };
    let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if ka != kb {
        return Err(err());
    }
    let batch = match (a_batched, b_batched) {
        (false, false) => 1,
        (true, false) => sa[0],
        (false, true) => sb[0],
        (true, true) => {
            if sa[0] != sb[0] {
                return Err(err());
            }
            sa[0]
        }
    };
    Ok(MatmulDims { batch, m, k: ka, n, a_batched, b_batched })
}
