use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, Rng, Tensor};
use crate::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    len: usize,
    d_in: usize,
    d_out: usize,
    width: usize,
    left: usize,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, f64),
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { input: usize, kernel: usize, bias: usize, cols: Vec<f64>, geom: ConvGeom },
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { x: usize, argmax: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    MaskedFill { x: usize, mask: Vec<bool> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    BceWithLogits { logits: usize, targets: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Leaves may borrow their tensors (`'a`) so that binding model parameters
/// does not copy them. Every forward op checks its output for NaN/Inf.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A trainable leaf that borrows its value.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn matrix(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        match self.val(i).shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (m, k) = self.matrix(op, ai)?;
        let (r, c) = self.matrix(op, bi)?;
        let (inner, n) = if trans_b { (c, r) } else { (r, c) };
        if inner != k {
            return Err(Error::Shape {
                op,
                left: self.val(ai).shape().to_vec(),
                right: self.val(bi).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(ai).data(), false, self.val(bi).data(), trans_b, 0.0, &mut out);
        finite(op, &out)?;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul { a: ai, b: bi, trans_b }, &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (x, y) = (self.val(ai), self.val(bi));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "add",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        finite("add", &out)?;
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::Add(ai, bi), &[ai, bi]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.index(x)?, self.index(bias)?);
        let (xv, bv) = (self.val(xi), self.val(bi));
        if bv.shape() != [xv.cols()] {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let b = bv.data();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        finite("add_bias", &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::AddBias { x: xi, bias: bi }, &[xi, bi]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        let out: Vec<f64> = xv.data().iter().map(|v| v * factor).collect();
        finite("scale", &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::Scale(xi, factor), &[xi]))
    }

    /// Gathers rows of a `V×d` table; the output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ti = self.index(table)?;
        let (vocab, d) = self.matrix("embedding", ti)?;
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                left: shape.to_vec(),
                right: vec![ids.len()],
            });
        }
        let tv = self.val(ti);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(
            value,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            &[ti],
        ))
    }

    /// Length-preserving 1-D convolution with zero padding.
    ///
    /// `input` is `L×d_in` or `B×L×d_in` (each of the `B` sequences is padded
    /// independently), `kernel` is `k×d_in×d_out` and `bias` is `d_out`.
    /// Output position `t` sees input positions `t - (k-1)/2 ..= t + k/2`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ii, ki, bi) = (self.index(input)?, self.index(kernel)?, self.index(bias)?);
        let in_shape = self.val(ii).shape().to_vec();
        let (batch, len, d_in) = match in_shape.as_slice() {
            &[l, c] => (1, l, c),
            &[b, l, c] => (b, l, c),
            s => {
                return Err(Error::Shape {
                    op: "conv1d",
                    left: s.to_vec(),
                    right: self.val(ki).shape().to_vec(),
                })
            }
        };
        let (width, d_out) = match self.val(ki).shape() {
            &[w, c, o] if c == d_in && w >= 1 => (w, o),
            s => {
                return Err(Error::Shape {
                    op: "conv1d",
                    left: in_shape.clone(),
                    right: s.to_vec(),
                })
            }
        };
        if self.val(bi).shape() != [d_out] {
            return Err(Error::Shape {
                op: "conv1d",
                left: vec![d_out],
                right: self.val(bi).shape().to_vec(),
            });
        }
        let geom = ConvGeom {
            batch,
            len,
            d_in,
            d_out,
            width,
            left: (width - 1) / 2,
        };
        let cols = im2col(self.val(ii).data(), geom);
        let rows = batch * len;
        let mut out = vec![0.0; rows * d_out];
        let b = self.val(bi).data();
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(b);
        }
        gemm(rows, width * d_in, d_out, &cols, false, self.val(ki).data(), false, 1.0, &mut out);
        finite("conv1d", &out)?;
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(
            value,
            Op::Conv1d {
                input: ii,
                kernel: ki,
                bias: bi,
                cols,
                geom,
            },
            &[ii, ki, bi],
        ))
    }

    fn unary(&mut self, x: Var, op: &'static str, f: impl Fn(f64) -> f64, make: fn(usize) -> Op) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        finite(op, &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, make(xi), &[xi]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        finite("softmax", &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::Softmax(xi), &[xi]))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let xv = self.val(xi);
        let c = xv.cols();
        if self.val(gi).shape() != [c] || self.val(bi).shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.val(gi).shape().to_vec(),
            });
        }
        let (g, b) = (self.val(gi).data(), self.val(bi).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        finite("layer_norm", &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(
            value,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            &[xi, gi, bi],
        ))
    }

    /// Maximum over the length axis: `L×d → d`, `B×L×d → B×d`.
    /// Ties route the gradient to the first maximal position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        let (batch, len, d, out_shape) = match xv.shape() {
            &[l, d] => (1, l, d, vec![d]),
            &[b, l, d] => (b, l, d, vec![b, d]),
            s => {
                return Err(Error::Shape {
                    op: "global_max_pool",
                    left: s.to_vec(),
                    right: vec![],
                })
            }
        };
        if len == 0 {
            return Err(Error::invalid("global_max_pool over an empty axis"));
        }
        let data = xv.data();
        let mut out = vec![f64::NEG_INFINITY; batch * d];
        let mut argmax = vec![0; batch * d];
        for b in 0..batch {
            for t in 0..len {
                for j in 0..d {
                    let src = (b * len + t) * d + j;
                    if data[src] > out[b * d + j] {
                        out[b * d + j] = data[src];
                        argmax[b * d + j] = src;
                    }
                }
            }
        }
        finite("global_max_pool", &out)?;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(value, Op::MaxPool { x: xi, argmax }, &[xi]))
    }

    /// Inverted dropout. In eval mode (or at rate 0) this returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xi = self.index(x)?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.val(xi).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.val(xi);
        let out: Vec<f64> = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::Dropout { x: xi, mask }, &[xi]))
    }

    /// Replaces entries where `mask` is true by `value` (no gradient flows
    /// through replaced entries).
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        if mask.len() != xv.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let out: Vec<f64> = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        finite("masked_fill", &out)?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(
            value,
            Op::MaskedFill {
                x: xi,
                mask: mask.to_vec(),
            },
            &[xi],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: xv.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.derived(value, Op::Reshape(xi), &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s: f64 = self.val(xi).data().iter().sum();
        finite("sum", &[s])?;
        Ok(self.derived(Tensor::scalar(s), Op::Sum(xi), &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = self.val(xi);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        finite("mean", &[s])?;
        Ok(self.derived(Tensor::scalar(s), Op::Mean(xi), &[xi]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in log-space.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let li = self.index(logits)?;
        let lv = self.val(li);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        finite("bce_with_logits", &[loss])?;
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: li,
                targets: targets.to_vec(),
            },
            &[li],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.index(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Tensor::new(self.nodes[i].value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = node.value.shape()[1];
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |da| gemm(m, n, k, g, false, bv, !*trans_b, 1.0, da));
                if *trans_b {
                    self.accumulate(grads, *b, |db| gemm(n, m, k, g, true, av, false, 1.0, db));
                } else {
                    self.accumulate(grads, *b, |db| gemm(k, m, n, av, true, g, false, 1.0, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                let c = node.value.cols();
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |dx| {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                cols,
                geom,
            } => {
                let rows = geom.batch * geom.len;
                let inner = geom.width * geom.d_in;
                self.accumulate(grads, *kernel, |dk| gemm(inner, rows, geom.d_out, cols, true, g, false, 1.0, dk));
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(geom.d_out) {
                        add_into(db, row);
                    }
                });
                let kv = self.val(*kernel).data();
                self.accumulate(grads, *input, |dx| {
                    let mut dcols = vec![0.0; rows * inner];
                    gemm(rows, geom.d_out, inner, g, false, kv, true, 0.0, &mut dcols);
                    col2im(&dcols, *geom, dx);
                });
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::Relu(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::Softmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.val(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dh = vec![0.0; c];
                    for (r, ((drow, grow), hrow)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            drow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |dx| {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }),
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::MaskedFill { x, mask } => self.accumulate(grads, *x, |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gv;
                    }
                }
            }),
            Op::Reshape(x) => self.accumulate(grads, *x, |dx| add_into(dx, g)),
            Op::Sum(x) => self.accumulate(grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                self.accumulate(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let z = self.val(*logits).data();
                self.accumulate(grads, *logits, |dx| {
                    for ((d, zv), t) in dx.iter_mut().zip(z).zip(targets) {
                        *d += g[0] * (sigmoid(*zv) - t) / n;
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let buf = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(input: &[f64], geom: ConvGeom) -> Vec<f64> {
    let inner = geom.width * geom.d_in;
    let mut cols = vec![0.0; geom.batch * geom.len * inner];
    for b in 0..geom.batch {
        for t in 0..geom.len {
            let row = &mut cols[(b * geom.len + t) * inner..(b * geom.len + t + 1) * inner];
            for j in 0..geom.width {
                let Some(src) = (t + j).checked_sub(geom.left).filter(|&s| s < geom.len) else {
                    continue;
                };
                let from = (b * geom.len + src) * geom.d_in;
                row[j * geom.d_in..(j + 1) * geom.d_in].copy_from_slice(&input[from..from + geom.d_in]);
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], geom: ConvGeom, dx: &mut [f64]) {
    let inner = geom.width * geom.d_in;
    for b in 0..geom.batch {
        for t in 0..geom.len {
            let row = &dcols[(b * geom.len + t) * inner..(b * geom.len + t + 1) * inner];
            for j in 0..geom.width {
                let Some(src) = (t + j).checked_sub(geom.left).filter(|&s| s < geom.len) else {
                    continue;
                };
                let to = (b * geom.len + src) * geom.d_in;
                add_into(&mut dx[to..to + geom.d_in], &row[j * geom.d_in..(j + 1) * geom.d_in]);
            }
        }
    }
}

/// Leaf adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
