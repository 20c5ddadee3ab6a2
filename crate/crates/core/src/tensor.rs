//! Dense rank-4 `f64` tensors in `(n, c, h, w)` layout and the raw
//! convolution kernels the autodiff tape is built on.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Shape of a rank-4 tensor, `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Shape of a per-channel vector, `(1, c, 1, 1)`.
    pub const fn vector(c: usize) -> Self {
        Self::new(1, c, 1, 1)
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor of 64-bit floats stored contiguously in `(n, c, h, w)`
/// row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(Error::invalid(format!("tensor shape {shape} has a zero dimension")));
        }
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "tensor shape {shape} has a zero dimension");
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a `1x1x1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same(op, self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        ensure_same("dot", self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start + len)`.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::invalid(format!(
                "channel slice [{start}, {}) out of range for shape {s}",
                start + len
            )));
        }
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::ShapeMismatch { op: "concat_channels", left: first, right: s });
            }
            c += s.c;
        }
        let out_shape = Shape::new(first.n, c, first.h, first.w);
        let plane = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for p in parts {
                let base = n * p.shape.c * plane;
                data.extend_from_slice(&p.data[base..base + p.shape.c * plane]);
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Stacks tensors of equal `(c, h, w)` along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch { op: "concat_batch", left: first, right: s });
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: Shape::new(n, first.c, first.h, first.w), data })
    }

    /// Crops the top-left `h x w` window of every plane.
    pub fn crop(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h == 0 || w == 0 || h > s.h || w > s.w {
            return Err(Error::invalid(format!("cannot crop {s} to {h}x{w}")));
        }
        Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| self.at(n, c, y, x)))
    }

    /// Replicate-pads right and bottom edges up to `h x w`.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h < s.h || w < s.w {
            return Err(Error::invalid(format!("cannot pad {s} down to {h}x{w}")));
        }
        Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
            self.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
        }))
    }
}

pub(crate) fn ensure_same(op: &'static str, left: Shape, right: Shape) -> Result<()> {
    if left != right {
        return Err(Error::ShapeMismatch { op, left, right });
    }
    Ok(())
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let full = (len - 1) * stride + k + out_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

// Planes smaller than this are not worth dispatching to the thread pool.
const PAR_MIN_WORK: usize = 1 << 15;

fn check_conv_args(op: &'static str, input: Shape, weight: Shape, in_axis_c: usize, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be positive")));
    }
    if weight.h != weight.w {
        return Err(Error::invalid(format!("{op}: kernel must be square, got {weight}")));
    }
    if weight.h % 2 == 0 {
        return Err(Error::invalid(format!("{op}: kernel size must be odd, got {}", weight.h)));
    }
    if input.c != in_axis_c {
        return Err(Error::ShapeMismatch { op, left: input, right: weight });
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape != Shape::vector(c_out) {
            return Err(Error::ShapeMismatch { op, left: b.shape, right: Shape::vector(c_out) });
        }
    }
    Ok(())
}

/// Zero-padded strided 2D cross-correlation.
///
/// `weight` is `(c_out, c_in, k, k)`; `bias`, if any, is `(1, c_out, 1, 1)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let is = input.shape;
    let ws = weight.shape;
    check_conv_args("conv2d", is, ws, ws.c, stride)?;
    check_bias("conv2d", bias, ws.n)?;
    let k = ws.h;
    let (oh, ow) = match (conv_out_len(is.h, k, stride, pad), conv_out_len(is.w, k, stride, pad)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::invalid(format!(
                "conv2d: kernel {k} with pad {pad} does not fit input {is}"
            )))
        }
    };
    let out_shape = Shape::new(is.n, ws.n, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let plane = oh * ow;
    let work = ws.c * k * k * plane;
    let fill = |idx: usize, dst: &mut [f64]| {
        let n = idx / ws.n;
        let co = idx % ws.n;
        let b = bias.map_or(0.0, |b| b.data[co]);
        dst.fill(b);
        for ci in 0..ws.c {
            let src = &input.data[(n * is.c + ci) * is.plane()..][..is.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight.data[((co * ws.c + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= is.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * is.w..][..is.w];
                        let drow = &mut dst[oy * ow..][..ow];
                        if stride == 1 {
                            // contiguous fast path
                            let x0 = pad.saturating_sub(kx);
                            let x1 = (is.w + pad).saturating_sub(kx).min(ow);
                            for ox in x0..x1 {
                                drow[ox] += wv * row[ox + kx - pad];
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < is.w {
                                    *d += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_MIN_WORK {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    }
    Tensor::from_vec(out_shape, out)
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same weight.
///
/// `weight` is `(c_in, c_out, k, k)`, i.e. the layout of the forward
/// convolution this operation is the adjoint of.
pub fn conv2d_transpose(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    conv2d_transpose_padded(input, weight, bias, stride, pad, (out_pad, out_pad))
}

/// [`conv2d_transpose`] with separate output padding for height and width.
pub fn conv2d_transpose_padded(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: (usize, usize),
) -> Result<Tensor> {
    let is = input.shape;
    let ws = weight.shape;
    check_conv_args("conv2d_transpose", is, ws, ws.n, stride)?;
    check_bias("conv2d_transpose", bias, ws.c)?;
    if out_pad.0 >= stride || out_pad.1 >= stride {
        return Err(Error::invalid(format!(
            "conv2d_transpose: out_pad {out_pad:?} must be smaller than stride {stride}"
        )));
    }
    let k = ws.h;
    let (oh, ow) = match (
        conv_transpose_out_len(is.h, k, stride, pad, out_pad.0),
        conv_transpose_out_len(is.w, k, stride, pad, out_pad.1),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(Error::invalid(format!("conv2d_transpose: empty output for input {is}"))),
    };
    conv_transpose_sized(input, weight, bias, stride, pad, oh, ow)
}

/// Transposed convolution into an explicitly sized output; contributions
/// falling outside `oh x ow` are dropped.
pub(crate) fn conv_transpose_sized(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor> {
    let is = input.shape;
    let ws = weight.shape;
    let k = ws.h;
    let c_out = ws.c;
    let out_shape = Shape::new(is.n, c_out, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let plane = oh * ow;
    let work = ws.n * k * k * is.plane();
    // Gather formulation: each output plane is owned by one worker, so the
    // accumulation order is fixed regardless of threading.
    let fill = |idx: usize, dst: &mut [f64]| {
        let n = idx / c_out;
        let co = idx % c_out;
        dst.fill(bias.map_or(0.0, |b| b.data[co]));
        for ci in 0..ws.n {
            let src = &input.data[(n * is.c + ci) * is.plane()..][..is.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight.data[((ci * c_out + co) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..is.h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let row = &src[iy * is.w..][..is.w];
                        let drow = &mut dst[oy as usize * ow..][..ow];
                        for (ix, &v) in row.iter().enumerate() {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox >= 0 && (ox as usize) < ow {
                                drow[ox as usize] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_MIN_WORK {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, d)| fill(i, d));
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradient of a [`conv2d`] loss with respect to the weight, given the
/// forward input and the output gradient.
pub(crate) fn conv2d_weight_grad(input: &Tensor, grad_out: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let is = input.shape;
    let gs = grad_out.shape;
    let wshape = Shape::new(gs.c, is.c, k, k);
    let mut gw = vec![0.0; wshape.numel()];
    let kk = k * k;
    let fill = |idx: usize, dst: &mut [f64]| {
        let co = idx / is.c;
        let ci = idx % is.c;
        for n in 0..is.n {
            let src = &input.data[(n * is.c + ci) * is.plane()..][..is.plane()];
            let g = &grad_out.data[(n * gs.c + co) * gs.plane()..][..gs.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..gs.h {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= is.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * is.w..][..is.w];
                        let grow = &g[oy * gs.w..][..gs.w];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < is.w {
                                acc += gv * row[ix as usize];
                            }
                        }
                    }
                    dst[ky * k + kx] += acc;
                }
            }
        }
    };
    if kk * gs.plane() * is.n * gs.c * is.c >= PAR_MIN_WORK {
        gw.par_chunks_mut(kk).enumerate().for_each(|(i, d)| fill(i, d));
    } else {
        gw.chunks_mut(kk).enumerate().for_each(|(i, d)| fill(i, d));
    }
    Tensor { shape: wshape, data: gw }
}

/// Per-channel sum over batch and spatial axes, shaped `(1, c, 1, 1)`.
pub(crate) fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape;
    let mut out = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (n * s.c + c) * s.plane();
            *o += t.data[base..base + s.plane()].iter().sum::<f64>();
        }
    }
    Tensor { shape: Shape::vector(s.c), data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Direct summation with no fast paths, used as an oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
            let mut acc = 0.0;
            for ci in 0..ws.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = lcg_tensor(Shape::new(2, 3, 5, 4), 1);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let b = Tensor::zeros(Shape::vector(3));
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
        assert_eq!(conv2d_transpose(&x, &w, None, 1, 0, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::ones(Shape::new(1, 1, 5, 5));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn stride_two_halves_resolution() {
        let x = Tensor::zeros(Shape::new(1, 3, 256, 256));
        let w = Tensor::zeros(Shape::new(64, 3, 5, 5));
        let y = conv2d(&x, &w, None, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 64, 128, 128));
    }

    #[test]
    fn transpose_output_size_matches_formula() {
        // enumerate the closed form against the kernel's actual output
        for h in 1..6 {
            for stride in 1..4 {
                for pad in 0..3 {
                    for out_pad in 0..stride {
                        let k = 5;
                        let expected = ((h - 1) * stride + k + out_pad) as isize - 2 * pad as isize;
                        let x = Tensor::ones(Shape::new(1, 1, h, h));
                        let w = Tensor::ones(Shape::new(1, 1, k, k));
                        let r = conv2d_transpose(&x, &w, None, stride, pad, out_pad);
                        if expected > 0 {
                            assert_eq!(r.unwrap().shape().h as isize, expected);
                        } else {
                            assert!(r.is_err());
                        }
                    }
                }
            }
        }
        let x = Tensor::zeros(Shape::new(1, 64, 16, 16));
        let w = Tensor::zeros(Shape::new(64, 3, 5, 5));
        let y = conv2d_transpose(&x, &w, None, 2, 2, 1).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (32, 32));
    }

    #[test]
    fn conv_matches_direct_summation() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 2), (2, 1), (3, 2)] {
            let x = lcg_tensor(Shape::new(2, 3, 9, 7), 7);
            let w = lcg_tensor(Shape::new(4, 3, 5, 5), 8);
            let got = conv2d(&x, &w, None, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2), (2, 0)] {
            let a = lcg_tensor(Shape::new(1, 2, 4, 4), 3);
            let w = lcg_tensor(Shape::new(3, 2, 3, 3), 4);
            let fa = conv2d(&a, &w, None, stride, pad).unwrap();
            let b = lcg_tensor(fa.shape(), 5);
            let tb = conv_transpose_sized(&b, &w, None, stride, pad, 4, 4).unwrap();
            let lhs = fa.dot(&b).unwrap();
            let rhs = a.dot(&tb).unwrap();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::zeros(Shape::new(1, 3, 8, 8));
        let w = Tensor::zeros(Shape::new(4, 2, 3, 3));
        match conv2d(&x, &w, None, 1, 1) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, x.shape());
                assert_eq!(right, w.shape());
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        assert!(conv2d(&x, &w, None, 0, 1).is_err());
        let even = Tensor::zeros(Shape::new(4, 3, 2, 2));
        assert!(conv2d(&x, &even, None, 1, 0).is_err());
        let y = Tensor::zeros(Shape::new(1, 4, 8, 8));
        assert!(conv2d_transpose(&y, &w, None, 2, 1, 2).is_err());
    }

    #[test]
    fn pad_and_crop_roundtrip() {
        let x = lcg_tensor(Shape::new(1, 3, 3, 5), 11);
        let p = x.pad_replicate(8, 8).unwrap();
        assert_eq!(p.at(0, 1, 7, 7), x.at(0, 1, 2, 4));
        assert_eq!(p.crop(3, 5).unwrap(), x);
    }
}
