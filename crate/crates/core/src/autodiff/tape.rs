use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
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
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Abs,
    Square,
    /// `ln σ(x)`, evaluated without overflow.
    LogSigmoid,
    /// Huber loss with unit transition point.
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Mean2x2,
    GlobalSum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    ScalarMul(Var, f32),
    ScalarAdd(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        filters: usize,
    },
    ChannelBias(Var, Var),
    MeanPool2(Var),
    GlobalSum(Var),
    Upsample2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SpectralDiv {
        w: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::ScalarMul(a, _)
            | Op::ScalarAdd(a)
            | Op::MeanPool2(a)
            | Op::GlobalSum(a)
            | Op::Upsample2(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Slice { x: a, .. }
            | Op::SoftmaxCe { logits: a, .. }
            | Op::SpectralDiv { w: a, .. } => vec![*a],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::ChannelBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// f64 value of single-element results, kept to avoid f32 rounding in
    /// finite-difference checks.
    precise: Option<f64>,
}

/// Reverse-mode differentiation tape.
///
/// Operations append nodes in evaluation order, so the node list is already
/// topologically sorted and backward is a single reverse sweep. The tape is
/// single-threaded (interior mutability through `RefCell`).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, panicking when `v` was not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f32 {
        self.value(v).item()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        self.push_precise(value, op, None)
    }

    fn push_precise(&self, value: Tensor, op: Op, precise: Option<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            ref op => op.inputs().iter().any(|i| nodes[i.0].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            precise,
        });
        Var(nodes.len() - 1)
    }

    /// Scalar value in f64. Reductions and scalar arithmetic carry an f64
    /// result, so this is more accurate than [`Tape::item`].
    pub fn item_f64(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.precise.unwrap_or_else(|| n.value.item() as f64)
    }

    /// Records a leaf; it is differentiable when `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.push(t.with_grad(true), Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ----- elementwise -------------------------------------------------

    pub fn unary(&self, kind: Unary, a: Var) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if kind == Unary::Log {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::domain(
                        "log",
                        format!("input must be positive, found {bad}"),
                    ));
                }
            }
            x.map(|v| unary_forward(kind, v))
        };
        Ok(self.push(out, Op::Unary(kind, a)))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn smooth_l1(&self, a: Var) -> Result<Var> {
        self.unary(Unary::SmoothL1, a)
    }

    /// Binary op on equal shapes, or with one single-element operand.
    pub fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            let f = |p: f32, q: f32| match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
            };
            if x.shape() == y.shape() {
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.shape(), data)?
            } else if y.is_scalar() {
                let q = y.item();
                x.map(|p| f(p, q))
            } else if x.is_scalar() {
                let p = x.item();
                y.map(|q| f(p, q))
            } else {
                let op = match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                };
                return Err(Error::shape(op, x.shape(), y.shape()));
            }
        };
        let precise = (out.numel() == 1).then(|| {
            let (p, q) = (self.item_f64(a), self.item_f64(b));
            match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
            }
        });
        Ok(self.push_precise(out, Op::Binary(kind, a, b), precise))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x * s);
        let precise = (out.numel() == 1).then(|| self.item_f64(a) * s as f64);
        self.push_precise(out, Op::ScalarMul(a, s), precise)
    }

    pub fn shift(&self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x + s);
        let precise = (out.numel() == 1).then(|| self.item_f64(a) + s as f64);
        self.push_precise(out, Op::ScalarAdd(a), precise)
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(Error::shape("matmul", x.shape(), y.shape()));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, x.data(), false, y.data(), false, &mut c, false);
            Tensor::new([m, n], c)?
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Zero-padded cross-correlation of `x: N×C×H×W` with `w: F×C×kh×kw`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom, filters) = {
            let (xt, wt) = (self.value(x), self.value(w));
            let (xs, ws) = (xt.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
                return Err(Error::shape("conv2d", xs, ws));
            }
            if stride == 0 {
                return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
            }
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (f, kh, kw) = (ws[0], ws[2], ws[3]);
            let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
            if kh > ph || kw > pw {
                return Err(Error::shape("conv2d", xs, ws));
            }
            if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
                return Err(Error::domain(
                    "conv2d",
                    format!(
                        "output size is not integral for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                    ),
                ));
            }
            let geom = ConvGeom {
                c,
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
                oh: (ph - kh) / stride + 1,
                ow: (pw - kw) / stride + 1,
            };
            let mut out = vec![0.0; n * f * geom.p()];
            kernels::conv2d_forward(&geom, n, f, xt.data(), wt.data(), &mut out);
            (Tensor::new([n, f, geom.oh, geom.ow], out)?, geom, f)
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            },
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: N×C×...`.
    pub fn channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let (xt, bt) = (self.value(x), self.value(b));
            let xs = xt.shape();
            if xs.len() < 2 || bt.shape() != [xs[1]] {
                return Err(Error::shape("channel_bias", xs, bt.shape()));
            }
            let c = xs[1];
            let inner: usize = xs[2..].iter().product();
            let mut data = xt.data().to_vec();
            for (i, chunk) in data.chunks_mut(inner).enumerate() {
                let bias = bt.data()[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            Tensor::new(xs, data)?
        };
        Ok(self.push(out, Op::ChannelBias(x, b)))
    }

    // ----- resampling ---------------------------------------------------

    pub fn pool(&self, x: Var, kind: Pool) -> Result<Var> {
        match kind {
            Pool::Mean2x2 => self.mean_pool2(x),
            Pool::GlobalSum => self.global_sum(x),
        }
    }

    fn mean_pool2(&self, x: Var) -> Result<Var> {
        let out = {
            let xt = self.value(x);
            let s = xt.shape();
            if s.len() != 4 {
                return Err(Error::shape("mean_pool2", s, &[0, 0, 0, 0]));
            }
            let (h, w) = (s[2], s[3]);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::domain(
                    "mean_pool2",
                    format!("spatial dims must be even, got {h}x{w}"),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let planes = s[0] * s[1];
            let mut out = vec![0.0; planes * oh * ow];
            let d = xt.data();
            for p in 0..planes {
                let src = &d[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                        let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                        dst[i * ow + j] = 0.25 * (a + b);
                    }
                }
            }
            Tensor::new([s[0], s[1], oh, ow], out)?
        };
        Ok(self.push(out, Op::MeanPool2(x)))
    }

    /// `N×C×H×W → N×C`.
    fn global_sum(&self, x: Var) -> Result<Var> {
        let out = {
            let xt = self.value(x);
            let s = xt.shape();
            if s.len() != 4 {
                return Err(Error::shape("global_sum", s, &[0, 0, 0, 0]));
            }
            let hw = s[2] * s[3];
            let data = xt
                .data()
                .chunks(hw)
                .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                .collect();
            Tensor::new([s[0], s[1]], data)?
        };
        Ok(self.push(out, Op::GlobalSum(x)))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let out = {
            let xt = self.value(x);
            let s = xt.shape();
            if s.len() != 4 {
                return Err(Error::shape("upsample2", s, &[0, 0, 0, 0]));
            }
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let planes = s[0] * s[1];
            let mut out = vec![0.0; planes * oh * ow];
            let d = xt.data();
            for p in 0..planes {
                let src = &d[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        dst[i * ow + j] = src[(i / 2) * w + j / 2];
                    }
                }
            }
            Tensor::new([s[0], s[1], oh, ow], out)?
        };
        Ok(self.push(out, Op::Upsample2(x)))
    }

    // ----- normalization ------------------------------------------------

    /// Batch norm over every dim except 1. With `running = None` the batch
    /// statistics are used (training mode) and returned.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (out, mean, inv_std, stats) = {
            let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
            let s = xt.shape();
            if s.len() < 2 || gt.shape() != [s[1]] || bt.shape() != [s[1]] {
                return Err(Error::shape("batch_norm", s, gt.shape()));
            }
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let d = xt.data();
            let (mean64, var64, stats): (Vec<f64>, Vec<f64>, _) = match running {
                Some((m, v)) => {
                    if m.len() != c || v.len() != c {
                        return Err(Error::shape("batch_norm", s, &[m.len()]));
                    }
                    (m.iter().map(|&x| x as f64).collect(), v.iter().map(|&x| x as f64).collect(), None)
                }
                None => {
                    if n * inner < 2 {
                        return Err(Error::domain(
                            "batch_norm",
                            "training mode needs at least two values per channel",
                        ));
                    }
                    let count = (n * inner) as f64;
                    let mut mean = vec![0.0f64; c];
                    let mut var = vec![0.0f64; c];
                    for ch in 0..c {
                        let mut sum = 0.0f64;
                        for b in 0..n {
                            let off = (b * c + ch) * inner;
                            sum += d[off..off + inner].iter().map(|&v| v as f64).sum::<f64>();
                        }
                        let mu = sum / count;
                        let mut sq = 0.0f64;
                        for b in 0..n {
                            let off = (b * c + ch) * inner;
                            sq += d[off..off + inner]
                                .iter()
                                .map(|&v| (v as f64 - mu).powi(2))
                                .sum::<f64>();
                        }
                        mean[ch] = mu;
                        var[ch] = sq / count;
                    }
                    let stats = BatchStats {
                        mean: mean.iter().map(|&x| x as f32).collect(),
                        var: var.iter().map(|&x| x as f32).collect(),
                    };
                    (mean, var, Some(stats))
                }
            };
            // normalize in f64 so rounding of the statistics does not leak
            // into every output of the channel
            let inv_std64: Vec<f64> = var64.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let (g, bb, mu, is) = (gt.data()[ch] as f64, bt.data()[ch] as f64, mean64[ch], inv_std64[ch]);
                    for i in off..off + inner {
                        out[i] = (g * (d[i] as f64 - mu) * is + bb) as f32;
                    }
                }
            }
            let mean: Vec<f32> = mean64.iter().map(|&x| x as f32).collect();
            let inv_std: Vec<f32> = inv_std64.iter().map(|&x| x as f32).collect();
            (Tensor::new(s, out)?, mean, inv_std, stats)
        };
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    // ----- reductions & shape -------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push_precise(Tensor::scalar(s as f32), Op::Sum(a), Some(s))
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let n = t.numel() as f64;
        drop(t);
        self.push_precise(Tensor::scalar((s / n) as f32), Op::Mean(a), Some(s / n))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::shape("reshape", t.shape(), shape));
            }
            Tensor::new(shape, t.data().to_vec())?
        };
        let precise = (out.numel() == 1).then(|| self.item_f64(a));
        Ok(self.push_precise(out, Op::Reshape(a), precise))
    }

    /// Concatenates along dim 0.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let first = parts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
            let tail = self.shape(*first)[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = self.value(*p);
                if t.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat", &self.shape(*first), t.shape()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&tail);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start+len` along dim 0.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let s = t.shape();
            if len == 0 || start + len > s[0] {
                return Err(Error::InvalidArgument(format!(
                    "slice {start}..{} out of range for {s:?}",
                    start + len
                )));
            }
            let row: usize = s[1..].iter().product();
            let mut shape = s.to_vec();
            shape[0] = len;
            Tensor::new(shape, t.data()[start * row..(start + len) * row].to_vec())?
        };
        Ok(self.push(out, Op::Slice { x, start }))
    }

    // ----- fused losses -------------------------------------------------

    /// Mean softmax cross-entropy over every position of `logits: N×K×...`
    /// against integer class targets laid out as `N×...`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let t = self.value(logits);
            let s = t.shape();
            if s.len() < 2 {
                return Err(Error::shape("softmax_cross_entropy", s, &[0, 0]));
            }
            let (n, k) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            if targets.len() != n * inner {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    s,
                    &[targets.len()],
                ));
            }
            if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
                return Err(Error::domain(
                    "softmax_cross_entropy",
                    format!("class id {bad} out of range for {k} classes"),
                ));
            }
            let d = t.data();
            let mut probs = vec![0.0f32; d.len()];
            let mut total = 0.0f64;
            for b in 0..n {
                for p in 0..inner {
                    let at = |c: usize| (b * k + c) * inner + p;
                    let mx = (0..k).map(|c| d[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                    let z: f64 = (0..k).map(|c| ((d[at(c)] - mx) as f64).exp()).sum();
                    for c in 0..k {
                        probs[at(c)] = (((d[at(c)] - mx) as f64).exp() / z) as f32;
                    }
                    let tgt = targets[b * inner + p];
                    total += z.ln() - (d[at(tgt)] - mx) as f64;
                }
            }
            (total / (n * inner) as f64, probs)
        };
        Ok(self.push_precise(
            Tensor::scalar(loss as f32),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Some(loss),
        ))
    }

    /// `w / σ` with `σ = uᵀ W v` for a weight viewed as `out × rest`; `u`
    /// and `v` are held constant for differentiation. A non-positive `σ` is
    /// replaced by 1.
    pub fn spectral_div(&self, w: Var, u: &[f32], v: &[f32]) -> Result<(Var, f32)> {
        let (out, sigma, degenerate) = {
            let t = self.value(w);
            let rows = t.shape()[0];
            let cols = t.numel() / rows;
            if u.len() != rows || v.len() != cols {
                return Err(Error::shape("spectral_div", t.shape(), &[u.len(), v.len()]));
            }
            let sigma = bilinear(t.data(), u, v) as f32;
            if sigma > f32::MIN_POSITIVE {
                (t.map(|x| x / sigma), sigma, false)
            } else {
                (t.map(|x| x), 1.0, true)
            }
        };
        // Empty u/v mark the degenerate case, where the op is the identity.
        let (u, v) = if degenerate {
            (Vec::new(), Vec::new())
        } else {
            (u.to_vec(), v.to_vec())
        };
        let var = self.push(out, Op::SpectralDiv { w, u, v, sigma });
        Ok((var, sigma))
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` for every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`], restricted to paths reaching `targets`.
    /// Sub-graphs that cannot reach any target are skipped entirely.
    pub fn backward_wrt(&self, loss: Var, targets: &[Var]) -> Result<Gradients> {
        self.backward_impl(loss, Some(targets))
    }

    fn backward_impl(&self, loss: Var, targets: Option<&[Var]>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let count = loss.0 + 1;
        let need: Vec<bool> = match targets {
            None => nodes.iter().map(|n| n.requires_grad).collect(),
            Some(ts) => {
                let mut need = vec![false; nodes.len()];
                for t in ts {
                    need[t.0] = nodes[t.0].requires_grad;
                }
                for i in 0..nodes.len() {
                    if !need[i] && nodes[i].requires_grad {
                        need[i] = nodes[i].op.inputs().iter().any(|v| need[v.0]);
                    }
                }
                need
            }
        };
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..count).rev() {
            if !need[i] {
                grads[i] = None;
                continue;
            }
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, node, &g, &need, &mut grads);
        }
        let out = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !(matches!(n.op, Op::Leaf) && need[i]) {
                    return None;
                }
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
                Some(Tensor::new(n.value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn bilinear(w: &[f32], u: &[f32], v: &[f32]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            let row = &w[r * cols..(r + 1) * cols];
            ur as f64 * row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
        })
        .sum()
}

fn unary_forward(kind: Unary, x: f32) -> f32 {
    match kind {
        Unary::Relu => x.max(0.0),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::LogSigmoid => x.min(0.0) - (-x.abs()).exp().ln_1p(),
        Unary::SmoothL1 => {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        }
    }
}

fn unary_grad(kind: Unary, x: f32, y: f32) -> f32 {
    match kind {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::LogSigmoid => unary_forward(Unary::Sigmoid, -x),
        Unary::SmoothL1 => x.clamp(-1.0, 1.0),
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f32>>],
    nodes: &[Node],
    v: Var,
    f: impl FnOnce(&mut [f32]),
) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(buf);
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &[f32],
    need: &[bool],
    grads: &mut [Option<Vec<f32>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            if need[a.0] {
                let x = val(*a).data();
                let y = node.value.data();
                accumulate(grads, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * unary_grad(*kind, x[i], y[i]);
                    }
                });
            }
        }
        Op::Binary(kind, a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let scalar_a = xa.shape() != xb.shape() && xa.is_scalar();
            let scalar_b = xa.shape() != xb.shape() && xb.is_scalar();
            let pick = |t: &Tensor, i: usize, scalar: bool| {
                if scalar {
                    t.data()[0]
                } else {
                    t.data()[i]
                }
            };
            if need[a.0] {
                let ga: Vec<f32> = (0..g.len())
                    .map(|i| match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * pick(xb, i, scalar_b),
                    })
                    .collect();
                accumulate(grads, nodes, *a, |buf| reduce_into(buf, &ga, scalar_a));
            }
            if need[b.0] {
                let gb: Vec<f32> = (0..g.len())
                    .map(|i| match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * pick(xa, i, scalar_a),
                    })
                    .collect();
                accumulate(grads, nodes, *b, |buf| reduce_into(buf, &gb, scalar_b));
            }
        }
        Op::ScalarMul(a, s) => {
            if need[a.0] {
                accumulate(grads, nodes, *a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += gi * s)
                });
            }
        }
        Op::ScalarAdd(a) | Op::Reshape(a) => {
            if need[a.0] {
                accumulate(grads, nodes, *a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += gi)
                });
            }
        }
        Op::MatMul(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
            if need[a.0] {
                accumulate(grads, nodes, *a, |buf| {
                    kernels::gemm(m, n, k, g, false, xb.data(), true, buf, true)
                });
            }
            if need[b.0] {
                accumulate(grads, nodes, *b, |buf| {
                    kernels::gemm(k, m, n, xa.data(), true, g, false, buf, true)
                });
            }
        }
        Op::Conv2d {
            x,
            w,
            geom,
            filters,
        } => {
            let n = val(*x).shape()[0];
            let mut dx = need[x.0].then(|| {
                grads[x.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; val(*x).numel()])
            });
            let mut dw = need[w.0].then(|| {
                grads[w.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; val(*w).numel()])
            });
            kernels::conv2d_backward(
                geom,
                n,
                *filters,
                val(*x).data(),
                val(*w).data(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
            if let Some(dx) = dx {
                grads[x.0] = Some(dx);
            }
            if let Some(dw) = dw {
                grads[w.0] = Some(dw);
            }
        }
        Op::ChannelBias(x, b) => {
            let s = val(*x).shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            if need[x.0] {
                accumulate(grads, nodes, *x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += gi)
                });
            }
            if need[b.0] {
                let mut gb = vec![0.0f64; c];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                accumulate(grads, nodes, *b, |buf| {
                    buf.iter_mut().zip(&gb).for_each(|(b, &v)| *b += v as f32)
                });
            }
        }
        Op::MeanPool2(x) => {
            if need[x.0] {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                accumulate(grads, nodes, *x, |buf| {
                    for p in 0..s[0] * s[1] {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut buf[p * h * w..(p + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] += 0.25 * src[(i / 2) * ow + j / 2];
                            }
                        }
                    }
                });
            }
        }
        Op::GlobalSum(x) => {
            if need[x.0] {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                accumulate(grads, nodes, *x, |buf| {
                    for (i, chunk) in buf.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|b| *b += g[i]);
                    }
                });
            }
        }
        Op::Upsample2(x) => {
            if need[x.0] {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                accumulate(grads, nodes, *x, |buf| {
                    for p in 0..s[0] * s[1] {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut buf[p * h * w..(p + 1) * h * w];
                        for i in 0..oh {
                            for j in 0..ow {
                                dst[(i / 2) * w + j / 2] += src[i * ow + j];
                            }
                        }
                    }
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let xt = val(*x);
            let s = xt.shape();
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let d = xt.data();
            let gam = val(*gamma).data();
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        let xhat = (d[i] - mean[ch]) * inv_std[ch];
                        sum_g[ch] += g[i] as f64;
                        sum_gx[ch] += (g[i] * xhat) as f64;
                    }
                }
            }
            if need[gamma.0] {
                accumulate(grads, nodes, *gamma, |buf| {
                    buf.iter_mut().zip(&sum_gx).for_each(|(b, &v)| *b += v as f32)
                });
            }
            if need[beta.0] {
                accumulate(grads, nodes, *beta, |buf| {
                    buf.iter_mut().zip(&sum_g).for_each(|(b, &v)| *b += v as f32)
                });
            }
            if need[x.0] {
                let m = (n * inner) as f64;
                accumulate(grads, nodes, *x, |buf| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            let mg = (sum_g[ch] / m) as f32;
                            let mgx = (sum_gx[ch] / m) as f32;
                            for i in off..off + inner {
                                if *batch_stats {
                                    let xhat = (d[i] - mean[ch]) * inv_std[ch];
                                    buf[i] += k * (g[i] - mg - xhat * mgx);
                                } else {
                                    buf[i] += k * g[i];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::Sum(a) => {
            if need[a.0] {
                accumulate(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
        }
        Op::Mean(a) => {
            if need[a.0] {
                let scale = g[0] / val(*a).numel() as f32;
                accumulate(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += scale));
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = val(*p).numel();
                if need[p.0] {
                    let src = &g[off..off + len];
                    accumulate(grads, nodes, *p, |buf| {
                        buf.iter_mut().zip(src).for_each(|(b, &v)| *b += v)
                    });
                }
                off += len;
            }
        }
        Op::Slice { x, start } => {
            if need[x.0] {
                let row: usize = val(*x).shape()[1..].iter().product();
                let off = start * row;
                accumulate(grads, nodes, *x, |buf| {
                    buf[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(b, &v)| *b += v)
                });
            }
        }
        Op::SoftmaxCe {
            logits,
            targets,
            probs,
        } => {
            if need[logits.0] {
                let s = val(*logits).shape();
                let (n, k) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let scale = g[0] / (n * inner) as f32;
                accumulate(grads, nodes, *logits, |buf| {
                    for b in 0..n {
                        for p in 0..inner {
                            let tgt = targets[b * inner + p];
                            for c in 0..k {
                                let i = (b * k + c) * inner + p;
                                let onehot = if c == tgt { 1.0 } else { 0.0 };
                                buf[i] += scale * (probs[i] - onehot);
                            }
                        }
                    }
                });
            }
        }
        Op::SpectralDiv { w, u, v, sigma } => {
            if need[w.0] && u.is_empty() {
                accumulate(grads, nodes, *w, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += gi)
                });
            } else if need[w.0] {
                let cols = v.len();
                let wn = node.value.data();
                let inner: f64 = g.iter().zip(wn).map(|(&a, &b)| a as f64 * b as f64).sum();
                let inner = inner as f32;
                accumulate(grads, nodes, *w, |buf| {
                    for (r, &ur) in u.iter().enumerate() {
                        for (c, &vc) in v.iter().enumerate() {
                            let i = r * cols + c;
                            buf[i] += (g[i] - inner * ur * vc) / sigma;
                        }
                    }
                });
            }
        }
    }
}

fn reduce_into(buf: &mut [f32], g: &[f32], scalar: bool) {
    if scalar {
        buf[0] += g.iter().map(|&v| v as f64).sum::<f64>() as f32;
    } else {
        buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v);
    }
}
