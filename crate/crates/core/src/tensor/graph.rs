use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::kernels::{self, ConvDims};
use super::{ParamId, ParamStore, Scalar, Tensor};

const BN_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

/// Per-channel statistics of one training-mode batch-norm call
/// (biased variance, as used for normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Narrow { x: Var, offset: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Exp { x: Var },
    Softmax { x: Var, n: usize },
    Conv2d { x: Var, weight: Var, dims: ConvDims, cols: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, channels: usize, hw: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Mean { x: Var },
    SumSquares { x: Var },
    AddRow { x: Var, v: Var, n: usize },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T>, n: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward record of executed operations; one reverse pass per graph.
///
/// Not `Sync`-shared: a graph belongs to one thread for its whole life.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::Detached);
        }
        Ok(&self.nodes[v.id])
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    /// Outputs of every `softmax_lastdim` recorded so far, in order; each is
    /// a row-stochastic attention map when produced by the attention ops.
    pub fn softmax_outputs(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Softmax { .. }))
            .map(|(id, _)| Var { id, graph: self.id })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self
            .node(v)
            .expect("variable belongs to a different graph")
            .value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    /// Records an input; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let needs = tensor.requires_grad;
        let value = Tensor {
            grad: None,
            ..tensor
        };
        self.push("leaf", value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Result<Var> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Binds a stored parameter; repeated binds return the same variable so
    /// a shared parameter accumulates gradient from every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.push("param", value, Op::Param, t.requires_grad)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul { a, b, m, k, n }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::transpose2(self.value(x).data(), rows, cols);
        let needs = self.needs(x);
        self.push("transpose", Tensor::new(vec![cols, rows], data)?, Op::Transpose { x, rows, cols }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.node(x)?.value.reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", value, Op::Reshape { x }, needs)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.node(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(inputs.len());
        let mut extent = 0;
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", &base, s));
            }
            extent += s[axis];
            chunks.push(s[axis] * tail);
        }
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            needs,
        )
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape: s,
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let needs = self.needs(x);
        self.push(
            "narrow",
            Tensor::new(shape, data)?,
            Op::Narrow {
                x,
                offset: start * row,
            },
            needs,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Result<(Tensor<T>, bool)> {
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        Ok((Tensor::new(t.shape().to_vec(), data)?, self.needs(x)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let (t, needs) = self.unary(x, |v| v * factor)?;
        self.push("scale", t, Op::Scale { x, factor }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (t, needs) = self.unary(x, |v| v.max(T::zero()))?;
        self.push("relu", t, Op::Relu { x }, needs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (t, needs) = self.unary(x, T::exp)?;
        self.push("exp", t, Op::Exp { x }, needs)
    }

    /// Softmax over the last axis of any-rank input.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let n = *t.shape().last().expect("rank >= 1");
        let data = kernels::softmax_rows(t.data(), n);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("softmax", value, Op::Softmax { x, n }, needs)
    }

    /// Stride-1 same-padded 2-D convolution: `x[B×C×H×W] ⊛ w[O×C×k×k]`, odd `k`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.node(x)?.value.shape(), self.node(weight)?.value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", sx, sw));
        }
        let dims = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
        };
        let (y, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(weight).data(), &dims);
        let shape = vec![dims.batch, dims.out_ch, dims.h, dims.w];
        let needs = self.needs(x) || self.needs(weight);
        self.push("conv2d", Tensor::new(shape, y)?, Op::Conv2d { x, weight, dims, cols }, needs)
    }

    /// 2×2 max-pool, stride 2, over the two trailing axes of a 4-D input.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.shape().to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::InvalidShape {
                op: "max_pool2",
                shape: s,
                reason: "expected B×C×H×W with H, W >= 2".into(),
            });
        }
        let (y, argmax) = kernels::maxpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        let needs = self.needs(x);
        self.push("max_pool2", Tensor::new(shape, y)?, Op::MaxPool { x, argmax }, needs)
    }

    fn check_norm_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.node(x)?.value.shape();
        let (sg, sb) = (self.node(gamma)?.value.shape(), self.node(beta)?.value.shape());
        if s.len() != 4 || sg != [s[1]] || sb != [s[1]] {
            return Err(shape_err("batch_norm", s, sg));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Training-mode batch norm using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (b, c, hw) = self.check_norm_shapes(x, gamma, beta)?;
        let (mean, var) = kernels::channel_moments(self.value(x).data(), b, c, hw);
        let eps = T::from_f64_lossy(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = self.normalize(x, gamma, beta, (b, c, hw), &mean, inv_std, true)?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: b * hw,
            },
        ))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let dims = self.check_norm_shapes(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(shape_err("batch_norm", &[dims.1], &[mean.len(), var.len()]));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, dims, mean, inv_std, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        (b, c, hw): (usize, usize, usize),
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    y[i] = gs[ch] * xhat[i] + bs[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels: c,
                hw,
                xhat,
                inv_std,
                train,
            },
            needs,
        )
    }

    /// Mean over all elements, as a 1-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let n = T::from_usize(t.numel()).expect("count fits");
        let m = t.data().iter().copied().sum::<T>() / n;
        let needs = self.needs(x);
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, needs)
    }

    /// Sum of squared elements, as a 1-element tensor.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().map(|&v| v * v).sum::<T>();
        let needs = self.needs(x);
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares { x }, needs)
    }

    /// Adds vector `v[n]` to every row of matrix `x[m×n]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.node(x)?.value.shape(), self.node(v)?.value.shape());
        if sx.len() != 2 || sv != [sx[1]] {
            return Err(shape_err("add_row", sx, sv));
        }
        let n = sx[1];
        let vd = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + vd[i % n])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(x) || self.needs(v);
        self.push("add_row", Tensor::new(shape, data)?, Op::AddRow { x, v, n }, needs)
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits[m×n]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", s, &[labels.len()]));
        }
        let n = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s.to_vec(),
                reason: format!("label {bad} out of range"),
            });
        }
        if !t.all_finite() {
            return Err(Error::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let probs = kernels::softmax_rows(t.data(), n);
        let mut total = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            // log p = z_l - max - log Σ exp(z - max), evaluated from logits for accuracy
            let z = &t.data()[row * n..(row + 1) * n];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - z[l]);
        }
        let m = T::from_usize(labels.len()).expect("count fits");
        let needs = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total / m),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
                n,
            },
            needs,
        )
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.graph != self.id {
            return Err(Error::Detached);
        }
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.id].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for idx in (0..=loss.id).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            bound: self.bound.iter().map(|(&p, &v)| (p, v.id)).collect(),
        })
    }

    /// Runs backward and writes gradients onto every trainable tensor of `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.write_to(store);
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.id].value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if self.nodes[v.id].needs_grad {
                accumulate(&mut grads[v.id], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_into(m, n, k, g, false, val(b), true, T::zero(), &mut da);
                    send(a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_into(k, m, n, val(a), true, g, false, T::zero(), &mut db);
                    send(b, db);
                }
            }
            &Op::Transpose { x, rows, cols } => send(x, kernels::transpose2(g, cols, rows)),
            &Op::Reshape { x } => send(x, g.to_vec()),
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    let mut part = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        part.extend_from_slice(&g[o * total + start..o * total + start + c]);
                    }
                    send(v, part);
                    start += c;
                }
            }
            &Op::Narrow { x, offset } => {
                let mut dx = vec![T::zero(); self.nodes[x.id].value.numel()];
                dx[offset..offset + g.len()].copy_from_slice(g);
                send(x, dx);
            }
            &Op::Add { a, b } => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub { a, b } => {
                send(a, g.to_vec());
                send(b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a), val(b));
                send(a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                send(b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            &Op::Scale { x, factor } => send(x, g.iter().map(|&v| v * factor).collect()),
            &Op::Relu { x } => send(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            &Op::Exp { x } => send(
                x,
                g.iter().zip(node.value.data()).map(|(&d, &e)| d * e).collect(),
            ),
            &Op::Softmax { x, n } => send(x, kernels::softmax_rows_backward(node.value.data(), g, n)),
            Op::Conv2d { x, weight, dims, cols } => {
                let (dx, dw) = kernels::conv2d_backward(g, cols, val(*weight), dims, self.needs(*x));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*weight, dw);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.id].value.numel()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                hw,
                xhat,
                inv_std,
                train,
            } => {
                let (c, hw) = (*channels, *hw);
                let b = g.len() / (c * hw);
                let gs = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                let count = T::from_usize(b * hw).expect("count fits");
                for ch in 0..c {
                    let idx = |bi: usize| (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                    let (mut s_dy, mut s_dyx) = (T::zero(), T::zero());
                    for bi in 0..b {
                        for i in idx(bi) {
                            s_dy = s_dy + g[i];
                            s_dyx = s_dyx + g[i] * xhat[i];
                        }
                    }
                    dgamma[ch] = s_dyx;
                    dbeta[ch] = s_dy;
                    let scale = gs[ch] * inv_std[ch];
                    for bi in 0..b {
                        for i in idx(bi) {
                            dx[i] = if *train {
                                scale * (g[i] - (s_dy + xhat[i] * s_dyx) / count)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            &Op::Mean { x } => {
                let n = self.nodes[x.id].value.numel();
                let d = g[0] / T::from_usize(n).expect("count fits");
                send(x, vec![d; n]);
            }
            &Op::SumSquares { x } => {
                let two = T::from_f64_lossy(2.0);
                send(x, val(x).iter().map(|&v| two * v * g[0]).collect());
            }
            &Op::AddRow { x, v, n } => {
                let mut dv = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, &e) in dv.iter_mut().zip(row) {
                        *d = *d + e;
                    }
                }
                send(x, g.to_vec());
                send(v, dv);
            }
            Op::SoftmaxXent { logits, labels, probs, n } => {
                let m = T::from_usize(labels.len()).expect("count fits");
                let scale = g[0] / m;
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * n + l] = d[row * n + l] - scale;
                }
                send(*logits, d);
            }
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was on a gradient path.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads[v.id].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// Sets `grad` on every trainable tensor in `store`; tensors the loss does
    /// not depend on get zeros.
    pub fn write_to(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let g = self
                .param(id)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.grad = Some(g);
        }
    }
}
