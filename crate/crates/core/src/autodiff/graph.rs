//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and hands each node's upstream gradient to its inputs.
//!
//! Every forward op validates shapes and rejects non-finite outputs with the
//! op name, so a NaN is reported where it first appears.

use super::linalg::gemm;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear sample: four (flat spatial index, weight) taps.
type Taps = [(usize, f64); 4];

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogFloor(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    SmoothL1(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    ChannelMean(Var),
    ChannelStd { x: Var, mean: Vec<f64> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Conv2d(Box<ConvSaved>),
    AvgPool { x: Var, k: usize },
    Bilinear { x: Var, taps: Vec<Taps> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBias(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | Offset(x) | Transpose(x) | Relu(x) | Exp(x) | Log(x) | LogFloor(x, _)
            | Sigmoid(x) | Softplus(x) | SmoothL1(x, _) | Sum(x) | Mean(x) | Softmax(x)
            | LogSoftmax(x) | Reshape(x) | ChannelMean(x) => vec![*x],
            SumAxis { x, .. }
            | Narrow { x, .. }
            | Gather { x, .. }
            | ChannelStd { x, .. }
            | AvgPool { x, .. }
            | Bilinear { x, .. }
            | L2NormalizeRows { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Conv2d(c) => {
                let mut v = vec![c.x, c.w];
                v.extend(c.b);
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let len: usize = shape.iter().product();
    (len / n.max(1), n)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf { .. } => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool, param: Option<String>) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf { param })?;
        self.nodes[v.0].needs_grad = needs_grad;
        Ok(v)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Leaf bound to a named parameter; [`Graph::backward_into`] accumulates
    /// its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?
            .clone();
        self.leaf(value, true, Some(name.to_string()))
    }

    /// Constant copy of `v`, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, value, op)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `b` (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = last_axis(self.shape(x));
        if self.shape(b) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.data(b).to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("add_bias", value, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + c, Op::Offset(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    /// `ln(max(x, floor))`; no gradient where `x < floor`.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.map("log_floor", x, |v| v.max(floor).ln(), Op::LogFloor(x, floor))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    /// Elementwise Huber-style smooth L1 with transition width `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::invalid("smooth_l1 beta must be positive"));
        }
        self.map(
            "smooth_l1",
            x,
            |v| {
                let a = v.abs();
                if a < beta {
                    0.5 * v * v / beta
                } else {
                    a - 0.5 * beta
                }
            },
            Op::SmoothL1(x, beta),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(new_shape, out), Op::SumAxis { x, axis })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = last_axis(t.shape());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Log-softmax over the last axis via a stabilized log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = last_axis(t.shape());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let d = self.shape(*p)[axis];
                out.extend_from_slice(&self.data(*p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow: {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * dim + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push("narrow", Tensor::from_parts(new_shape, out), Op::Narrow { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", src.len())));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        self.push(
            "gather",
            Tensor::from_parts(vec![idx.len()], out),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Selects rows of a matrix, `(rows.len(), cols)`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("gather_rows: need a matrix, got {s:?}")));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range {}", s[0])));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * s[1]..(r + 1) * s[1]).collect();
        let flat = self.gather(x, &idx)?;
        self.reshape(flat, &[rows.len(), s[1]])
    }

    /// Picks `x[i, cols[i]]` from a matrix.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != cols.len() || cols.iter().any(|&c| c >= s[1]) {
            return Err(Error::invalid(format!("pick: {} columns from {s:?}", cols.len())));
        }
        let idx: Vec<usize> = cols.iter().enumerate().map(|(r, c)| r * s[1] + c).collect();
        self.gather(x, &idx)
    }

    fn channel_split(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::invalid(format!("{op}: need (C, ...) input, got {s:?}")));
        }
        Ok((s[0], s[1..].iter().product()))
    }

    /// Spatial mean of each channel of a `(C, ...)` tensor.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.channel_split("channel_mean", x)?;
        let out = self.data(x).chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect();
        debug_assert_eq!(c, self.shape(x)[0]);
        self.push("channel_mean", Tensor::from_parts(vec![c], out), Op::ChannelMean(x))
    }

    /// `sqrt(spatial variance + eps)` of each channel.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, n) = self.channel_split("channel_std", x)?;
        let mut means = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in self.data(x).chunks(n) {
            let m = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            means.push(m);
            out.push((var + eps).sqrt());
        }
        self.push(
            "channel_std",
            Tensor::from_parts(vec![c], out),
            Op::ChannelStd { x, mean: means },
        )
    }

    /// `x[c, ...] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, n) = self.channel_split("channel_affine", x)?;
        for v in [scale, shift] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "channel_affine",
                    left: self.shape(x).to_vec(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let (sc, sh) = (self.data(scale), self.data(shift));
        let out = self
            .data(x)
            .chunks(n)
            .enumerate()
            .flat_map(|(ci, ch)| ch.iter().map(move |v| v * sc[ci] + sh[ci]))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("channel_affine", value, Op::ChannelAffine { x, scale, shift })
    }

    /// 2-D convolution of a `(Cin, H, W)` map with `(Cout, Cin, k, k)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid(format!("conv2d: kernel {k} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let ckk = cin * k * k;
        let src = self.data(x);
        let mut cols = vec![0.0; ckk * p];
        for ci in 0..cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * p;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src_row = ci * h * wd + ii as usize * wd;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < wd as isize {
                                cols[row + oi * wo + oj] = src[src_row + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * p];
        gemm(cout, ckk, p, self.data(w), false, &cols, false, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.data(b);
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let value = Tensor::from_parts(vec![cout, ho, wo], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d(Box::new(ConvSaved {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            })),
        )
    }

    /// Non-overlapping `k x k` average pooling of a `(C, H, W)` map.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(Error::invalid(format!("avg_pool: window {k} does not tile {s:?}")));
        }
        if k == 1 {
            return self.reshape(x, &s);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.data(x);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ci * ho + i / k) * wo + j / k] += src[(ci * h + i) * w + j] * norm;
                }
            }
        }
        self.push("avg_pool", Tensor::from_parts(vec![c, ho, wo], out), Op::AvgPool { x, k })
    }

    /// Bilinearly samples a `(C, H, W)` map at `points` given in cell
    /// coordinates (cell `(i, j)` has its center at `(j, i)`), clamping to the
    /// border. Returns `(P, C)`. Gradients flow to the map only.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("bilinear_sample: need (C, H, W), got {s:?}")));
        }
        if points.is_empty() {
            return Err(Error::invalid("bilinear_sample with no points"));
        }
        if points.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::NonFinite { op: "bilinear_sample" });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let axis = |v: f64, n: usize| -> (usize, usize, f64) {
            let v = v.clamp(0.0, (n - 1) as f64);
            let lo = (v.floor() as usize).min(n.saturating_sub(2));
            let hi = (lo + 1).min(n - 1);
            (lo, hi, v - lo as f64)
        };
        let taps: Vec<Taps> = points
            .iter()
            .map(|&(px, py)| {
                let (x0, x1, fx) = axis(px, w);
                let (y0, y1, fy) = axis(py, h);
                [
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ]
            })
            .collect();
        let src = self.data(x);
        let mut out = vec![0.0; points.len() * c];
        for (p, t) in taps.iter().enumerate() {
            let row = &mut out[p * c..(p + 1) * c];
            for (ci, o) in row.iter_mut().enumerate() {
                let ch = &src[ci * hw..(ci + 1) * hw];
                *o = t.iter().map(|&(i, wt)| ch[i] * wt).sum();
            }
        }
        let value = Tensor::from_parts(vec![points.len(), c], out);
        self.push("bilinear_sample", value, Op::Bilinear { x, taps })
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("l2_normalize_rows: need a matrix, got {s:?}")));
        }
        let n = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * n);
        for row in self.data(x).chunks(n) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nrm);
            out.extend(row.iter().map(|v| v / nrm));
        }
        self.push(
            "l2_normalize_rows",
            Tensor::from_parts(s, out),
            Op::L2NormalizeRows { x, norms },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    store.accumulate(name, g)?;
                }
            }
        }
        Ok(grads)
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        // accumulates into the gradient buffer of `v` if it needs one
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * out[k] / vb[k];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::Offset(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, vb, true, d, 1.0));
                acc(*b, &mut |d| gemm(k, m, n, va, true, g, false, d, 1.0));
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for a in 0..r {
                        for b in 0..c {
                            d[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vx[k];
                    }
                });
            }
            Op::LogFloor(x, floor) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] >= *floor {
                            d[k] += g[k] / vx[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(vx[k]);
                    }
                });
            }
            Op::SmoothL1(x, beta) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let v = vx[k];
                        let slope = if v.abs() < *beta { v / beta } else { v.signum() };
                        d[k] += g[k] * slope;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for k in 0..dim {
                            let base = (o * dim + k) * inner;
                            for j in 0..inner {
                                d[base + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, n) = last_axis(nodes[x.0].value.shape());
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            drow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (_, n) = last_axis(nodes[x.0].value.shape());
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let gs: f64 = grow.iter().sum();
                        for k in 0..n {
                            drow[k] += grow[k] - yrow[k].exp() * gs;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let oshape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for p in parts {
                    let dim = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * dim * inner;
                            for j in 0..dim * inner {
                                d[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += dim;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |d| {
                for (k, &j) in idx.iter().enumerate() {
                    d[j] += g[k];
                }
            }),
            Op::ChannelMean(x) => {
                let n = nodes[x.0].value.len() / g.len();
                acc(*x, &mut |d| {
                    for (ci, ch) in d.chunks_mut(n).enumerate() {
                        let share = g[ci] / n as f64;
                        ch.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::ChannelStd { x, mean } => {
                let vx = val(*x);
                let n = vx.len() / g.len();
                acc(*x, &mut |d| {
                    for ci in 0..g.len() {
                        let k = g[ci] / (n as f64 * out[ci]);
                        for j in ci * n..(ci + 1) * n {
                            d[j] += k * (vx[j] - mean[ci]);
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = nodes[scale.0].value.len();
                let n = g.len() / c;
                let (vx, vs) = (val(*x), val(*scale));
                acc(*x, &mut |d| {
                    for ci in 0..c {
                        for j in ci * n..(ci + 1) * n {
                            d[j] += g[j] * vs[ci];
                        }
                    }
                });
                acc(*scale, &mut |d| {
                    for ci in 0..c {
                        d[ci] += (ci * n..(ci + 1) * n).map(|j| g[j] * vx[j]).sum::<f64>();
                    }
                });
                acc(*shift, &mut |d| {
                    for ci in 0..c {
                        d[ci] += g[ci * n..(ci + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d(c) => {
                let xs = nodes[c.x.0].value.shape();
                let ws = nodes[c.w.0].value.shape();
                let os = nodes[i].value.shape();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (os[1], os[2]);
                let p = ho * wo;
                let ckk = cin * k * k;
                acc(c.w, &mut |d| gemm(cout, p, ckk, g, false, &c.cols, true, d, 1.0));
                if let Some(b) = c.b {
                    acc(b, &mut |d| {
                        for co in 0..cout {
                            d[co] += g[co * p..(co + 1) * p].iter().sum::<f64>();
                        }
                    });
                }
                if nodes[c.x.0].needs_grad {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, cout, p, val(c.w), true, g, false, &mut dcols, 0.0);
                    let (stride, pad) = (c.stride, c.pad);
                    acc(c.x, &mut |d| {
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let row = ((ci * k + ki) * k + kj) * p;
                                    for oi in 0..ho {
                                        let ii = (oi * stride + ki) as isize - pad as isize;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        let dst_row = ci * h * wd + ii as usize * wd;
                                        for oj in 0..wo {
                                            let jj = (oj * stride + kj) as isize - pad as isize;
                                            if jj >= 0 && jj < wd as isize {
                                                d[dst_row + jj as usize] += dcols[row + oi * wo + oj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::AvgPool { x, k } => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                acc(*x, &mut |d| {
                    for ci in 0..c {
                        for a in 0..h {
                            for b in 0..w {
                                d[(ci * h + a) * w + b] += g[(ci * ho + a / k) * wo + b / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x, taps } => {
                let s = nodes[x.0].value.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                acc(*x, &mut |d| {
                    for (p, t) in taps.iter().enumerate() {
                        for ci in 0..c {
                            let gv = g[p * c + ci];
                            if gv == 0.0 {
                                continue;
                            }
                            for &(j, wt) in t {
                                d[ci * hw + j] += gv * wt;
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = nodes[x.0].value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, nrm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            d[r * n + k] += (gr[k] - y[k] * dot) / nrm;
                        }
                    }
                });
            }
        }
    }
}
