//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value and enough saved
//! context to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so walking them backwards visits each node after all of
//! its consumers.

use std::rc::Rc;

use super::kernels::{self, ConvDims, ConvGeometry, PoolDims, PoolKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Elementwise {
    Relu,
    Tanh,
    SignedSqrt,
    /// Divide each row (last axis) by `max(‖row‖₂, 1e-12)`.
    L2Normalize,
    Scale(f64),
    Add(Var),
    Mul(Var),
}

pub const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Tanh(Var),
    SignedSqrt(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        dims: PoolDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Outer(Var, Var),
    SumPool {
        x: Var,
        k: usize,
    },
    WeightedSum {
        terms: Vec<(Var, usize)>,
        weights: Var,
    },
    EmbeddingMean {
        table: Var,
        ids: Vec<usize>,
        mask: Vec<f64>,
        seq: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode [`Tape::batch_norm`]:
/// per-channel mean and unbiased variance.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn strides3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Rc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: impl Into<Rc<Tensor>>) -> Var {
        self.push_node(t.into(), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Rc<Tensor>>) -> Var {
        self.push_node(t.into(), Op::Leaf, false)
    }

    pub fn input(&mut self, t: impl Into<Rc<Tensor>>, requires_grad: bool) -> Var {
        self.push_node(t.into(), Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |e| c * e);
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[N, C, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let (outer, c, inner) = strides3(sx, 1);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                data[start..start + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let t = Tensor::from_parts(sx.to_vec(), data);
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    /// `sign(v)·√|v|`; the subgradient at 0 is taken as 0.
    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| if e == 0.0 { 0.0 } else { e.signum() * e.abs().sqrt() });
        self.push(t, Op::SignedSqrt(x), &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap_or(&1);
        let rows = v.numel() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut data = v.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            let denom = n.max(L2_EPS);
            row.iter_mut().for_each(|e| *e /= denom);
            norms.push(n);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn elementwise(&mut self, x: Var, kind: Elementwise) -> Result<Var> {
        Ok(match kind {
            Elementwise::Relu => self.relu(x),
            Elementwise::Tanh => self.tanh(x),
            Elementwise::SignedSqrt => self.signed_sqrt(x),
            Elementwise::L2Normalize => self.l2_normalize(x),
            Elementwise::Scale(c) => self.scale(x, c),
            Elementwise::Add(y) => self.add(x, y)?,
            Elementwise::Mul(y) => self.mul(x, y)?,
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, k, inner) = strides3(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let max = (0..k).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..k {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..k {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits` (`[N × K]`) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let t = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// 2-D cross-correlation (no kernel flip).
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(w), &geom)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims, &geom);
        let t = Tensor::from_parts(vec![dims.n, dims.f, dims.ho, dims.wo], out);
        Ok(self.push(t, Op::Conv2d { x, w, geom, dims }, &[x, w]))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(x);
        let dims = PoolDims::resolve(s, kernel, stride, padding)?;
        let shape = vec![s[0], s[1], dims.ho, dims.wo];
        let src = self.value(x).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(src, &dims);
                self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, &[x])
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(src, &dims);
                self.push(Tensor::from_parts(shape, out), Op::AvgPool { x, dims }, &[x])
            }
        })
    }

    /// Per-channel normalization over batch and spatial axes of `x`
    /// (`[N, C, ...]`), followed by the affine `gamma`, `beta`.
    ///
    /// With `running = None` batch statistics are used and returned; with
    /// `Some((mean, var))` those fixed statistics are applied instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        let (outer, c, inner) = strides3(&sx, 1);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &sx, self.shape(p)));
            }
        }
        let m = outer * inner;
        let src = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((mu, var)) => {
                if mu.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &sx, &[mu.len()]));
                }
                (mu.to_vec(), var.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for o in 0..outer {
                        let start = (o * c + ch) * inner;
                        acc += src[start..start + inner].iter().sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0;
                    for o in 0..outer {
                        let start = (o * c + ch) * inner;
                        sq += src[start..start + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                for i in start..start + inner {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("global_avg_pool expects NCHW, got {s:?}")));
        }
        let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
        let shape = vec![s[0], s[1]];
        let src = self.value(x).data();
        let data = (0..nc).map(|p| src[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides3(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{} on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, k, inner) = strides3(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * k + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, &[x]))
    }

    /// Batched outer product: `[N × I]`, `[N × J]` → `[N × I·J]`, row-major in (i, j).
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("outer", sa, sb));
        }
        let (n, i_len, j_len) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * i_len * j_len);
        for r in 0..n {
            for i in 0..i_len {
                let ai = va[r * i_len + i];
                data.extend(vb[r * j_len..(r + 1) * j_len].iter().map(|bj| ai * bj));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, i_len * j_len], data),
            Op::Outer(a, b),
            &[a, b],
        ))
    }

    /// Sums non-overlapping windows of `k` along the last axis.
    pub fn sum_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::invalid("sum_pool on a scalar"))?;
        if k == 0 || d % k != 0 {
            return Err(Error::invalid(format!("sum_pool window {k} does not divide {d}")));
        }
        let src = self.value(x).data();
        let data = src.chunks(k).map(|w| w.iter().sum()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = d / k;
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumPool { x, k }, &[x]))
    }

    /// `Σ_t weights[idx_t] · x_t` over same-shaped terms, accumulated in the
    /// order given.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::invalid("weighted_sum of nothing"))?;
        let shape = self.shape(first).to_vec();
        let wv = self.value(weights).data();
        let mut data = vec![0.0; shape.iter().product()];
        for &(v, idx) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, t.shape()));
            }
            let w = *wv
                .get(idx)
                .ok_or_else(|| Error::invalid(format!("weight index {idx} out of range")))?;
            for (o, x) in data.iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let mut inputs: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        inputs.push(weights);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    /// Masked mean of embedding rows: `ids` and `mask` are `[N × T]`
    /// row-major; returns `[N × D]`.
    pub fn embedding_mean(&mut self, table: Var, ids: &[usize], mask: &[f64], seq: usize) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || seq == 0 || ids.len() != mask.len() || ids.len() % seq != 0 {
            return Err(Error::shape("embedding_mean", s, &[ids.len(), seq]));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let n = ids.len() / seq;
        let e = self.value(table).data();
        let mut data = vec![0.0; n * dim];
        for r in 0..n {
            let weight: f64 = mask[r * seq..(r + 1) * seq].iter().sum();
            if weight <= 0.0 {
                return Err(Error::invalid(format!("attention mask of row {r} is all zeros")));
            }
            let out = &mut data[r * dim..(r + 1) * dim];
            for t in 0..seq {
                let m = mask[r * seq + t];
                if m == 0.0 {
                    continue;
                }
                let id = ids[r * seq + t];
                for (o, v) in out.iter_mut().zip(&e[id * dim..(id + 1) * dim]) {
                    *o += m * v;
                }
            }
            out.iter_mut().for_each(|o| *o /= weight);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, dim], data),
            Op::EmbeddingMean {
                table,
                ids: ids.to_vec(),
                mask: mask.to_vec(),
                seq,
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Runs reverse-mode accumulation from the scalar `loss`.
    ///
    /// A tape can be differentiated once; later calls fail.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot => *slot = Some(d),
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    acc(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| c * v).collect()),
            Op::AddBias { x, bias } => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let (outer, c, inner) = strides3(nodes[x.0].value.shape(), 1);
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            *d += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Relu(x) => acc(*x, g.iter().zip(out).map(|(d, y)| if *y > 0.0 { *d } else { 0.0 }).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect()),
            Op::SignedSqrt(x) => acc(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(d, y)| if *y == 0.0 { 0.0 } else { d / (2.0 * y.abs()) })
                    .collect(),
            ),
            Op::L2Normalize { x, norms } => {
                let dim = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    let (gy, y) = (&g[span.clone()], &out[span.clone()]);
                    if norm > L2_EPS {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx[span].iter_mut().zip(gy).zip(y) {
                            *d = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (d, gv) in dx[span].iter_mut().zip(gy) {
                            *d = gv / L2_EPS;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, k, inner) = strides3(nodes[x.0].value.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * k + j) * inner + ii;
                        let dot: f64 = (0..k).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..k {
                            dx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                acc(*logits, d);
            }
            Op::Conv2d { x, w, geom, dims } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, dims, geom, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; nodes[x.0].value.numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, dims } => acc(*x, kernels::avg_pool_backward(g, dims)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, inner) = strides3(nodes[x.0].value.shape(), 1);
                let m = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let start = (o * c + ch) * inner;
                        for idx in start..start + inner {
                            sum_g[ch] += g[idx];
                            sum_gx[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                if wants(*x) {
                    let gm = val(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            let start = (o * c + ch) * inner;
                            for idx in start..start + inner {
                                dx[idx] = if *batch_stats {
                                    k * (g[idx] - sum_g[ch] / m - xhat[idx] * sum_gx[ch] / m)
                                } else {
                                    k * g[idx]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for gv in g {
                    dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = strides3(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        acc(v, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, k, inner) = strides3(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                let mut dx = vec![0.0; outer * k * inner];
                for o in 0..outer {
                    let to = (o * k + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Outer(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, il, jl) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                let mut da = vec![0.0; n * il];
                let mut db = vec![0.0; n * jl];
                for r in 0..n {
                    for ii in 0..il {
                        let grow = &g[(r * il + ii) * jl..(r * il + ii + 1) * jl];
                        let brow = &vb[r * jl..(r + 1) * jl];
                        da[r * il + ii] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let ai = va[r * il + ii];
                        for (d, gv) in db[r * jl..(r + 1) * jl].iter_mut().zip(grow) {
                            *d += ai * gv;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumPool { x, k } => {
                let mut dx = Vec::with_capacity(g.len() * k);
                for gv in g {
                    dx.extend(std::iter::repeat(*gv).take(*k));
                }
                acc(*x, dx);
            }
            Op::WeightedSum { terms, weights } => {
                let wv = val(*weights);
                let mut dw = vec![0.0; wv.len()];
                for &(v, idx) in terms {
                    if wants(v) {
                        acc(v, g.iter().map(|d| wv[idx] * d).collect());
                    }
                    dw[idx] += g.iter().zip(val(v)).map(|(a, b)| a * b).sum::<f64>();
                }
                acc(*weights, dw);
            }
            Op::EmbeddingMean { table, ids, mask, seq } => {
                let s = nodes[table.0].value.shape();
                let dim = s[1];
                let mut dt = vec![0.0; s[0] * dim];
                for r in 0..ids.len() / seq {
                    let row_mask = &mask[r * seq..(r + 1) * seq];
                    let weight: f64 = row_mask.iter().sum();
                    let gr = &g[r * dim..(r + 1) * dim];
                    for t in 0..*seq {
                        let m = row_mask[t];
                        if m == 0.0 {
                            continue;
                        }
                        let id = ids[r * seq + t];
                        for (d, gv) in dt[id * dim..(id + 1) * dim].iter_mut().zip(gr) {
                            *d += m / weight * gv;
                        }
                    }
                }
                acc(*table, dt);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
    }
}
