use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{shape_err, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation, `0.5·x·(1 + tanh(0.7978845608·(x + 0.044715·x³)))`.
    Gelu,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    ChannelBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry, c_out: usize, cols: Option<Vec<T>> },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MeanPool(Var),
    Gather { x: Var, index: Arc<[usize]> },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Nll { p: Var, target: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::AddConst(..) => "add_const",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::ChannelBias(..) => "channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool(..) => "global_avg_pool",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Nll { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading batch dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (1, *m, *k, kb, n)
            }
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (*ba, *m, *k, kb, n)
            }
            _ => return shape_err(format!("matmul operands {sa:?} and {sb:?}")),
        };
        if k != kb {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} · {sb:?}"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let a_blk = &da[bi * m * k..(bi + 1) * m * k];
                let b_blk = &db[bi * k * n..(bi + 1) * k * n];
                let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(a_blk, b_blk, c_blk, m, k, n);
                } else {
                    kernels::gemm(a_blk, b_blk, c_blk, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, trans_b, batch, m, k, n },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = self.value(b).len();
        let db = self.data(b);
        let data = self
            .data(a)
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(db).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::AddBroadcast(a, b), &[a, b])
    }

    /// Adds a non-differentiable tensor of the same shape (masks, biases fixed
    /// by construction).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err(format!("add_const {:?} + {:?}", self.shape(a), c.shape()));
        }
        let data = self.data(a).iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::AddConst(a), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err(format!("mul_const {:?} * {:?}", self.shape(a), c.shape()));
        }
        let data = self.data(a).iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds `b[c]` to every element of channel `c` of `x[C×H×W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(b) != [sx[0]] {
            return shape_err(format!("channel bias {:?} onto {sx:?}", self.shape(b)));
        }
        let plane = sx[1] * sx[2];
        let db = self.data(b);
        let data = self
            .data(x)
            .chunks_exact(plane)
            .zip(db)
            .flat_map(|(ch, &bias)| ch.iter().map(move |&v| v + bias))
            .collect();
        self.push(Tensor::new(sx, data)?, Op::ChannelBias(x, b), &[x, b])
    }

    /// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, h, wd], [c_out, c_in_w, k, k2]) = (sx.as_slice(), sw.as_slice()) else {
            return shape_err(format!("conv2d input {sx:?} with kernels {sw:?}"));
        };
        if c_in != c_in_w || k != k2 {
            return shape_err(format!("conv2d input {sx:?} with kernels {sw:?}"));
        }
        let Some(geom) = ConvGeometry::new(*c_in, *h, *wd, *k, stride, padding) else {
            return shape_err(format!(
                "kernel {k}×{k} (stride {stride}) does not fit {h}×{wd} input with padding {padding}"
            ));
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let p = geom.positions();
        let mut out = vec![T::zero(); c_out * p];
        kernels::gemm(self.data(w), &cols, &mut out, *c_out, geom.patch_len(), p);
        let keep_cols = self.requires_grad(w).then_some(cols);
        self.push(
            Tensor::new(vec![*c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d { x, w, geom, c_out: *c_out, cols: keep_cols },
            &[x, w],
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let data = kernels::softmax_rows(self.data(x), n);
        self.push(Tensor::new(s, data)?, Op::Softmax(x), &[x])
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// (biased) variance, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm over {d} features with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let xs = self.data(x);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut rstd = Vec::with_capacity(xs.len() / d);
        for ((src, xh), dst) in xs.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)) {
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for i in 0..d {
                xh[i] = (src[i] - mean) * r;
                dst[i] = g[i] * xh[i] + b[i];
            }
        }
        self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Mean over spatial positions of `C×H×W` (giving `C`) or over the rows of
    /// `N×d` tokens (giving `d`).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let xs = self.data(x);
        let data = match s.as_slice() {
            [_, h, w] => {
                let inv = T::one() / T::of((h * w) as f64);
                xs.chunks_exact(h * w)
                    .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) * inv)
                    .collect()
            }
            [n, d] => {
                let inv = T::one() / T::of(*n as f64);
                let mut acc = vec![T::zero(); *d];
                for row in xs.chunks_exact(*d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc.into_iter().map(|a| a * inv).collect()
            }
            _ => return shape_err(format!("global_avg_pool needs rank 2 or 3, got {s:?}")),
        };
        let c = if s.len() == 3 { s[0] } else { s[1] };
        self.push(Tensor::new(vec![c], data)?, Op::MeanPool(x), &[x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers transposes,
    /// window partitions, rolls and slicing.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let xs = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xs.len()) {
            return shape_err(format!("gather index {bad} out of range for {} values", xs.len()));
        }
        let data = index.iter().map(|&i| xs[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err(format!("concat {:?} with leading dims {lead:?}", s));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let v = self.value(x).sum() / T::of(n as f64);
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Cross-entropy of a probability vector against a class index,
    /// `-ln(max(p[y], 1e-12))`.
    pub fn cross_entropy(&mut self, p: Var, target: usize) -> Result<Var> {
        let s = self.shape(p);
        if s.len() != 1 {
            return shape_err(format!("cross_entropy expects a probability vector, got {s:?}"));
        }
        if target >= s[0] {
            return Err(Error::Data(format!("class {target} out of range for {} classes", s[0])));
        }
        let py = self.data(p)[target];
        let v = -py.max(T::of(PROB_FLOOR)).ln();
        self.push(Tensor::scalar(v), Op::Nll { p, target }, &[p])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf marked `requires_grad` receives a gradient; leaves with no
    /// path to the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    }
                })
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, batch, m, k, n } => {
                let (da, db) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::gemm(gc, bb, dst, m, n, k);
                        } else {
                            kernels::gemm_nt(gc, bb, dst, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // d(bᵀ) = aᵀ·g  ⇒  d(b) = gᵀ·a
                            kernels::gemm_tn(gc, ab, dst, n, m, k);
                        } else {
                            kernels::gemm_tn(ab, gc, dst, k, m, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::AddBroadcast(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::AddConst(a) => self.accumulate(grads, a, |ga| add_into(ga, g)),
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(db) {
                        *d += gi * y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(da) {
                        *d += gi * x;
                    }
                });
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, |ga| {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(c) {
                    *d += gi * y;
                }
            }),
            &Op::Scale(a, s) => self.accumulate(grads, a, |ga| {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }),
            &Op::ChannelBias(x, b) => {
                self.accumulate(grads, x, |gx| add_into(gx, g));
                let plane = g.len() / self.value(b).len();
                self.accumulate(grads, b, |gb| {
                    for (d, ch) in gb.iter_mut().zip(g.chunks_exact(plane)) {
                        *d += ch.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
            }
            Op::Conv2d { x, w, geom, c_out, cols } => {
                let p = geom.positions();
                let kl = geom.patch_len();
                if let Some(cols) = cols {
                    self.accumulate(grads, *w, |gw| kernels::gemm_nt(g, cols, gw, *c_out, p, kl));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); kl * p];
                    kernels::gemm_tn(self.data(*w), g, &mut dcols, kl, *c_out, p);
                    self.accumulate(grads, *x, |gx| kernels::col2im(&dcols, geom, gx));
                }
            }
            &Op::Relu(x) => self.accumulate(grads, x, |gx| {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    if y > T::zero() {
                        *d += gi;
                    }
                }
            }),
            &Op::Gelu(x) => {
                let xs = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xs) {
                        *d += gi * kernels::gelu_grad(v);
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, x, |gx| {
                    for ((dst, gy), y) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                        let dot = gy.iter().zip(y).fold(T::zero(), |a, (&u, &v)| a + u * v);
                        for j in 0..n {
                            dst[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gam = self.data(*gamma);
                self.accumulate(grads, *gamma, |gg| {
                    for (gy, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gy in g.chunks_exact(d) {
                        add_into(gb, gy);
                    }
                });
                let inv_d = T::one() / T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    for (((dst, gy), xh), &r) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = gy[j] * gam[j];
                            mean_g += gh;
                            mean_gx += gh * xh[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..d {
                            let gh = gy[j] * gam[j];
                            dst[j] += r * (gh - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
            }
            &Op::MeanPool(x) => {
                let s = self.shape(x).to_vec();
                self.accumulate(grads, x, |gx| match s.as_slice() {
                    [_, h, w] => {
                        let inv = T::one() / T::of((h * w) as f64);
                        for (ch, &gi) in gx.chunks_exact_mut(h * w).zip(g) {
                            for d in ch {
                                *d += gi * inv;
                            }
                        }
                    }
                    [n, d] => {
                        let inv = T::one() / T::of(*n as f64);
                        for row in gx.chunks_exact_mut(*d) {
                            for (dst, &gi) in row.iter_mut().zip(g) {
                                *dst += gi * inv;
                            }
                        }
                    }
                    _ => unreachable!("validated in forward"),
                });
            }
            Op::Gather { x, index } => self.accumulate(grads, *x, |gx| {
                for (&src, &gi) in index.iter().zip(g) {
                    gx[src] += gi;
                }
            }),
            &Op::Reshape(x) => self.accumulate(grads, x, |gx| add_into(gx, g)),
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Sum(x) => self.accumulate(grads, x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::Mean(x) => {
                let inv = T::one() / T::of(self.value(x).len() as f64);
                self.accumulate(grads, x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0] * inv;
                    }
                });
            }
            &Op::Nll { p, target } => {
                let py = self.data(p)[target];
                if py > T::of(PROB_FLOOR) {
                    self.accumulate(grads, p, |gp| gp[target] -= g[0] / py);
                }
            }
        }
    }
}

/// Probability floor inside the log of cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf created with `requires_grad`, `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but panics for a leaf that never asked for a
    /// gradient.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for this variable")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
