//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! forward value and enough bookkeeping to push gradients back to its
//! parents. [`Tape::backward`] walks the list in exact reverse order of
//! recording. Nodes whose inputs never require a gradient are still
//! recorded (their values are needed), but are skipped during the sweep.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use crate::error::{Error, Result};
use crate::tensor::{self, ensure_same, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupedPointwise { x: Var, w: Var, b: Option<Var>, groups: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ChannelMul(Var, Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Ln(Var),
    Square(Var),
    NormalCdf(Var),
    ClampMin(Var, f64),
    RoundSte(Var),
    Sum(Var),
    SliceChannels { x: Var, start: usize },
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Round half away from zero, the rounding rule used by every quantizer.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        self.conv2d_transpose_padded(x, w, b, stride, pad, (out_pad, out_pad))
    }

    pub fn conv2d_transpose_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let out = tensor::conv2d_transpose_padded(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b, stride, pad }, rg))
    }

    /// Per-group dense map over channels: `x` has `groups * c_in` channels,
    /// `w` is `(groups * c_out, c_in, 1, 1)`.
    pub fn grouped_pointwise(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if groups == 0 || xs.c % groups != 0 || ws.n % groups != 0 || ws.h != 1 || ws.w != 1 || ws.c * groups != xs.c {
            return Err(Error::ShapeMismatch { op: "grouped_pointwise", left: xs, right: ws });
        }
        if let Some(b) = b {
            ensure_same("grouped_pointwise", self.shape(b), Shape::vector(ws.n))?;
        }
        let cin = ws.c;
        let cout = ws.n / groups;
        let plane = xs.plane();
        let out_shape = Shape::new(xs.n, ws.n, xs.h, xs.w);
        let mut out = vec![0.0; out_shape.numel()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for n in 0..xs.n {
                for g in 0..groups {
                    for o in 0..cout {
                        let co = g * cout + o;
                        let dst = &mut out[(n * ws.n + co) * plane..][..plane];
                        dst.fill(bv.map_or(0.0, |b| b[co]));
                        for i in 0..cin {
                            let wgt = wv[co * cin + i];
                            let src = &xv[(n * xs.c + g * cin + i) * plane..][..plane];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(out, Op::GroupedPointwise { x, w, b, groups }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    /// Multiplies by a scalar constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// Scales every channel of `x` by the matching entry of the
    /// `(1, c, 1, 1)` vector `v`.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        ensure_same("channel_mul", self.shape(v), Shape::vector(xs.c))?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        let plane = xs.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let s = vv[i % xs.c];
            chunk.iter_mut().for_each(|d| *d *= s);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::ChannelMul(x, v), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, normal_cdf, Op::NormalCdf(a))
    }

    /// `max(x, lo)`; the gradient is blocked where the bound is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Rounds half away from zero in the forward pass and passes the
    /// gradient through unchanged.
    pub fn round_ste(&mut self, a: Var) -> Var {
        self.unary(a, round_half_away, Op::RoundSte(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `-sum(log2(x))`, the information content of a likelihood tensor.
    pub fn neg_log2_sum(&mut self, a: Var) -> Var {
        let l = self.ln(a);
        let s = self.sum(l);
        self.scale(s, -1.0 / LN_2)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Back-propagates from a scalar `loss`, visiting nodes in exact reverse
    /// order of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.data_mut().iter_mut().zip(t.data()).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| self.value(v);
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(x), val(w));
                if self.rg(x) {
                    let xs = xv.shape();
                    acc(x, tensor::conv_transpose_sized(g, wv, None, stride, pad, xs.h, xs.w)?);
                }
                if self.rg(w) {
                    acc(w, tensor::conv2d_weight_grad(xv, g, wv.shape().h, stride, pad));
                }
                if let Some(b) = b {
                    acc(b, tensor::channel_sums(g));
                }
            }
            Op::ConvTranspose { x, w, b, stride, pad } => {
                let (xv, wv) = (val(x), val(w));
                if self.rg(x) {
                    acc(x, tensor::conv2d(g, wv, None, stride, pad)?);
                }
                if self.rg(w) {
                    // The transpose is the adjoint of conv2d(., w) mapping the
                    // output space back onto x, so roles of input and gradient swap.
                    acc(w, tensor::conv2d_weight_grad(g, xv, wv.shape().h, stride, pad));
                }
                if let Some(b) = b {
                    acc(b, tensor::channel_sums(g));
                }
            }
            Op::GroupedPointwise { x, w, b, groups } => {
                let (xv, wv) = (val(x), val(w));
                let (xs, ws) = (xv.shape(), wv.shape());
                let cin = ws.c;
                let cout = ws.n / groups;
                let plane = xs.plane();
                let mut gx = vec![0.0; xs.numel()];
                let mut gw = vec![0.0; ws.numel()];
                for n in 0..xs.n {
                    for gi in 0..groups {
                        for o in 0..cout {
                            let co = gi * cout + o;
                            let gp = &g.data()[(n * ws.n + co) * plane..][..plane];
                            for i in 0..cin {
                                let ci = gi * cin + i;
                                let xp = &xv.data()[(n * xs.c + ci) * plane..][..plane];
                                gw[co * cin + i] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                                let wgt = wv.data()[co * cin + i];
                                let gxp = &mut gx[(n * xs.c + ci) * plane..][..plane];
                                for (d, s) in gxp.iter_mut().zip(gp) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
                acc(x, Tensor::from_vec(xs, gx)?);
                acc(w, Tensor::from_vec(ws, gw)?);
                if let Some(b) = b {
                    acc(b, tensor::channel_sums(g));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    acc(a, g.zip_map(val(b), "mul", |g, y| g * y)?);
                }
                if self.rg(b) {
                    acc(b, g.zip_map(val(a), "mul", |g, x| g * x)?);
                }
            }
            Op::Div(a, b) => {
                let bv = val(b);
                if self.rg(a) {
                    acc(a, g.zip_map(bv, "div", |g, y| g / y)?);
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(bv, "div", |q, y| -q / y)?;
                    acc(b, g.zip_map(&t, "div", |g, d| g * d)?);
                }
            }
            Op::Scale(a, s) => acc(a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::ChannelMul(x, v) => {
                let (xv, vv) = (val(x), val(v));
                let xs = xv.shape();
                let plane = xs.plane();
                if self.rg(x) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        let s = vv.data()[i % xs.c];
                        chunk.iter_mut().for_each(|d| *d *= s);
                    }
                    acc(x, gx);
                }
                if self.rg(v) {
                    let prod = g.zip_map(xv, "channel_mul", |a, b| a * b)?;
                    acc(v, tensor::channel_sums(&prod));
                }
            }
            Op::LeakyRelu(a, slope) => {
                acc(a, g.zip_map(val(a), "leaky_relu", |g, x| if x > 0.0 { g } else { g * slope })?)
            }
            Op::Tanh(a) => acc(a, g.zip_map(out, "tanh", |g, t| g * (1.0 - t * t))?),
            Op::Sigmoid(a) => acc(a, g.zip_map(out, "sigmoid", |g, s| g * s * (1.0 - s))?),
            Op::Softplus(a) => acc(a, g.zip_map(val(a), "softplus", |g, x| g * sigmoid(x))?),
            Op::Abs(a) => acc(a, g.zip_map(val(a), "abs", |g, x| g * sign(x))?),
            Op::Ln(a) => acc(a, g.zip_map(val(a), "ln", |g, x| g / x)?),
            Op::Square(a) => acc(a, g.zip_map(val(a), "square", |g, x| 2.0 * g * x)?),
            Op::NormalCdf(a) => acc(a, g.zip_map(val(a), "normal_cdf", |g, x| g * normal_pdf(x))?),
            Op::ClampMin(a, lo) => acc(a, g.zip_map(val(a), "clamp_min", |g, x| if x > lo { g } else { 0.0 })?),
            Op::RoundSte(a) => acc(a, g.clone()),
            Op::Sum(a) => {
                let s = g.item();
                acc(a, Tensor::full(self.shape(a), s));
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(x);
                let gs = g.shape();
                let mut gx = Tensor::zeros(xs);
                let plane = xs.plane();
                for n in 0..xs.n {
                    let dst = &mut gx.data_mut()[(n * xs.c + start) * plane..][..gs.c * plane];
                    dst.copy_from_slice(&g.data()[n * gs.c * plane..][..gs.c * plane]);
                }
                acc(x, gx);
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.rg(p) {
                        acc(p, g.channels(start, c)?);
                    }
                    start += c;
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path connects them.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; exactly zero when `v` does not reach
    /// the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}
