//! Recorded reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product later. Nodes are only ever
//! appended, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{self, KronDims};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of values produced on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded to the nearest `f32`.
    F32,
}

/// Layout of a fused multi-head self-attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid (unpadded) length of every sequence; keys past it are masked.
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Kron(Var, Var),
    KronApply {
        c: Var,
        d: Var,
        x: Var,
        dims: KronDims,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        log_ratio: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an append-only list of executed primitives.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            precision: Precision::F64,
            check_finite: false,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Flag non-finite op outputs as errors instead of letting them flow.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input variables of `v`, in operand order; empty for leaves.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.inputs_of(&self.nodes[v.0].op)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        if self.check_finite && data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: alloc::format!("output of {op_name}"),
            });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Kron(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::KronApply { c, d, x, .. } => vec![*c, *d, *x],
            Op::Scale(a, _)
            | Op::ScaleRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::ScatterAddRows { base, src, .. } => vec![*base, *src],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { p, q, .. } => vec![*p, *q],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = linalg::matmul(self.value(a), self.value(b))?;
        let shape = out.shape().to_vec();
        self.push("matmul", shape, out.into_data(), Op::MatMul(a, b))
    }

    pub fn kron(&mut self, c: Var, d: Var) -> Result<Var> {
        let out = linalg::kron(self.value(c), self.value(d))?;
        let shape = out.shape().to_vec();
        self.push("kron", shape, out.into_data(), Op::Kron(c, d))
    }

    /// `x · kron(c, d)` without materializing the Kronecker product.
    pub fn kron_apply(&mut self, c: Var, d: Var, x: Var) -> Result<Var> {
        let dims = KronDims::check(self.value(c), self.value(d), self.value(x))?;
        let data = linalg::kron_apply_raw(self.value(c).data(), self.value(d).data(), self.value(x).data(), dims);
        self.push("kron_apply", vec![dims.batch, dims.q * dims.t], data, Op::KronApply { c, d, x, dims })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = linalg::transpose(self.value(a))?;
        let shape = out.shape().to_vec();
        self.push("transpose", shape, out.into_data(), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", shape.to_vec(), out.into_data(), Op::Reshape(a))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("scale", shape, data, Op::Scale(a, k))
    }

    /// `x[n×d] + b[d]`, the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_bias")?;
        if self.value(b).numel() != d || self.value(b).rank() != 1 {
            return Err(Error::shape("add_bias", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in data[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_bias", vec![n, d], data, Op::AddBias(x, b))
    }

    /// Scales row `i` of a matrix by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let (n, d) = self.dims2(x, "scale_rows")?;
        if weights.len() != n {
            return Err(Error::shape("scale_rows", self.value(x).shape(), &[weights.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, w) in weights.iter().enumerate() {
            data[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= w);
        }
        self.push("scale_rows", vec![n, d], data, Op::ScaleRows(x, weights))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidData("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", self.value(x).shape(), &[bad]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("gather_rows", vec![idx.len(), d], data, Op::GatherRows(x, idx))
    }

    /// `out = base; out[idx[i]] += src[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, d) = self.dims2(base, "scatter_add_rows")?;
        let (m, d2) = self.dims2(src, "scatter_add_rows")?;
        if d != d2 || m != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add_rows", self.value(base).shape(), self.value(src).shape()));
        }
        let mut data = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(&s[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        self.push("scatter_add_rows", vec![n, d], data, Op::ScatterAddRows { base, src, idx })
    }

    // ---- neural network pieces ----

    /// Row-wise layer normalization with affine `gamma`, `beta` of length d.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != d || self.value(p).rank() != 1 {
                return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push("layer_norm", vec![n, d], out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("gelu", shape, data, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("relu", shape, data, Op::Relu(x))
    }

    /// Looks up rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidData(alloc::format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::InvalidData("embedding lookup with no ids".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push("embedding", vec![ids.len(), d], data, Op::Embedding { table, ids })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum() / self.value(x).numel() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "softmax")?;
        let data = softmax_rows(self.value(x).data(), n, c);
        self.push("softmax", vec![n, c], data, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "log_softmax")?;
        let data = log_softmax_rows(self.value(x).data(), n, c);
        self.push("log_softmax", vec![n, c], data, Op::LogSoftmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[bad]));
        }
        let logp = log_softmax_rows(self.value(logits).data(), n, c);
        let loss = -targets.iter().enumerate().map(|(r, &t)| logp[r * c + t]).sum::<f64>() / n as f64;
        let probs = logp.iter().map(|v| libm::exp(*v)).collect();
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Mean over rows of `KL(softmax(p) ‖ softmax(q))`; `p` is the reference.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, c) = self.dims2(p, "kl_divergence")?;
        self.same_shape(p, q, "kl_divergence")?;
        let logp = log_softmax_rows(self.value(p).data(), n, c);
        let logq = log_softmax_rows(self.value(q).data(), n, c);
        let p_probs: Vec<f64> = logp.iter().map(|v| libm::exp(*v)).collect();
        let q_probs: Vec<f64> = logq.iter().map(|v| libm::exp(*v)).collect();
        let log_ratio: Vec<f64> = logp.iter().zip(&logq).map(|(a, b)| a - b).collect();
        let total: f64 = p_probs.iter().zip(&log_ratio).map(|(a, r)| a * r).sum();
        let loss = (total / n as f64).max(0.0);
        self.push("kl_divergence", vec![1], vec![loss], Op::KlDiv { p, q, p_probs, q_probs, log_ratio })
    }

    /// Fused multi-head scaled dot-product self-attention over `batch`
    /// sequences of `seq` rows each; `q`, `k`, `v` are `(batch·seq)×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != spec.batch * spec.seq || spec.heads == 0 || d % spec.heads != 0 || spec.lengths.len() != spec.batch {
            return Err(Error::shape("attention", self.value(q).shape(), &[spec.batch, spec.seq, spec.heads]));
        }
        if spec.lengths.iter().any(|&l| l == 0 || l > spec.seq) {
            return Err(Error::InvalidData("attention lengths must be in 1..=seq".into()));
        }
        let (probs, out) = attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), d, &spec);
        self.push("attention", vec![rows, d], out, Op::Attention { q, k, v, spec, probs })
    }

    // ---- reverse sweep ----

    /// Gradients of the scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    self.accumulate(grads, *a, linalg::gemm_bt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, linalg::gemm_at(val(*a), g, m, k, n));
                }
            }
            Op::Kron(c, d) => {
                let (p, q) = self.nodes[c.0].value.dims2("kron").unwrap();
                let (s, t) = self.nodes[d.0].value.dims2("kron").unwrap();
                let cols = q * t;
                let (cv, dv) = (val(*c), val(*d));
                let mut gc = vec![0.0; p * q];
                let mut gd = vec![0.0; s * t];
                for i in 0..p {
                    for j in 0..q {
                        for u in 0..s {
                            for v in 0..t {
                                let go = g[(i * s + u) * cols + j * t + v];
                                gc[i * q + j] += go * dv[u * t + v];
                                gd[u * t + v] += go * cv[i * q + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *d, gd);
            }
            Op::KronApply { c, d, x, dims } => {
                let (gc, gd, gx) = linalg::kron_apply_backward(val(*c), val(*d), val(*x), g, *dims);
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *d, gd);
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.iter().map(|v| v * k).collect()),
            Op::AddBias(x, b) => {
                let d = self.nodes[b.0].value.numel();
                if wants(*b) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::ScaleRows(x, w) => {
                let d = node.value.shape()[1];
                let mut gx = g.to_vec();
                for (r, wr) in w.iter().enumerate() {
                    gx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= wr);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, idx_list) => {
                if wants(*x) {
                    let d = node.value.shape()[1];
                    let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (r, &i) in idx_list.iter().enumerate() {
                        for c in 0..d {
                            gx[i * d + c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ScatterAddRows { base, src, idx } => {
                self.accumulate(grads, *base, g.to_vec());
                if wants(*src) {
                    let d = node.value.shape()[1];
                    let mut gs = Vec::with_capacity(idx.len() * d);
                    for &i in idx {
                        gs.extend_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    self.accumulate(grads, *src, gs);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let (m, n) = node.value.dims2("transpose").unwrap();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] = g[i * n + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = node.value.dims2("layer_norm").unwrap();
                let gm = val(*gamma);
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                            gb[c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gm[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        let k = rstd[r] / d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gm[c];
                            gx[r * d + c] = k * (d as f64 * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let gx = g.iter().zip(val(*x)).map(|(gi, &v)| gi * gelu_grad(v)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.iter().zip(val(*x)).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = node.value.shape()[1];
                    let mut gt = vec![0.0; self.nodes[table.0].value.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Softmax(x) => {
                let (n, c) = node.value.dims2("softmax").unwrap();
                let y = node.value.data();
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    let dot: f64 = (0..c).map(|j| g[r * c + j] * y[r * c + j]).sum();
                    for j in 0..c {
                        gx[r * c + j] = y[r * c + j] * (g[r * c + j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let (n, c) = node.value.dims2("log_softmax").unwrap();
                let y = node.value.data();
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        gx[r * c + j] = g[r * c + j] - libm::exp(y[r * c + j]) * gs;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::KlDiv { p, q, p_probs, q_probs, log_ratio } => {
                let (n, c) = self.nodes[p.0].value.dims2("kl_divergence").unwrap();
                let scale = g[0] / n as f64;
                if wants(*q) {
                    let gq = q_probs.iter().zip(p_probs).map(|(qv, pv)| (qv - pv) * scale).collect();
                    self.accumulate(grads, *q, gq);
                }
                if wants(*p) {
                    let mut gp = vec![0.0; n * c];
                    for r in 0..n {
                        let row = r * c..(r + 1) * c;
                        let mean_r: f64 = p_probs[row.clone()].iter().zip(&log_ratio[row]).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gp[r * c + j] = p_probs[r * c + j] * (log_ratio[r * c + j] - mean_r) * scale;
                        }
                    }
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let d = node.value.shape()[1];
                let (gq, gk, gv) = attention_backward(val(*q), val(*k), val(*v), probs, g, d, spec);
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

pub(crate) fn log_softmax_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
        for j in 0..c {
            out[r * c + j] = row[j] - lse;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    log_softmax_rows(x, n, c).into_iter().map(libm::exp).collect()
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: usize, spec: &AttentionSpec) -> (Vec<f64>, Vec<f64>) {
    let (t, h) = (spec.seq, spec.heads);
    let dh = d / h;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut probs = vec![0.0; spec.batch * h * t * t];
    let mut out = vec![0.0; spec.batch * t * d];
    for b in 0..spec.batch {
        let len = spec.lengths[b];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let qi = &q[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                let limit = if spec.causal { (i + 1).min(len) } else { len };
                let prow = &mut probs[((b * h + head) * t + i) * t..((b * h + head) * t + i + 1) * t];
                let mut m = f64::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &k[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    prow[j] = s;
                    m = m.max(s);
                }
                let mut z = 0.0;
                for p in prow[..limit].iter_mut() {
                    *p = libm::exp(*p - m);
                    z += *p;
                }
                for p in prow[..limit].iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                for j in 0..limit {
                    let vj = &v[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += prow[j] * vv;
                    }
                }
            }
        }
    }
    (probs, out)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    d: usize,
    spec: &AttentionSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, h) = (spec.seq, spec.heads);
    let dh = d / h;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..spec.batch {
        let len = spec.lengths[b];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let limit = if spec.causal { (i + 1).min(len) } else { len };
                let prow = &probs[((b * h + head) * t + i) * t..((b * h + head) * t + i + 1) * t];
                let gi = &g[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                let mut dot = 0.0;
                for j in 0..limit {
                    let vj = &v[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += dp[j] * prow[j];
                    let gvj = &mut gv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    for (o, gg) in gvj.iter_mut().zip(gi) {
                        *o += prow[j] * gg;
                    }
                }
                for j in 0..limit {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let qrow = (b * t + i) * d + off;
                    let krow = (b * t + j) * d + off;
                    for c in 0..dh {
                        gq[qrow + c] += ds * k[krow + c];
                        gk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
