//! Quality metrics and Bjøntegaard deltas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same, Tensor};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ensure_same("psnr", a.shape(), b.shape())?;
    let mse = mse(a, b)?;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_same("mse", a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Maps `[0, 1]` values to 8-bit levels after clamping.
pub fn to_8bit(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round())
}

/// PSNR on the 8-bit scale of two `[0, 1]` images, both clamped and
/// rounded to 8-bit first.
pub fn psnr_8bit(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr(&to_8bit(a), &to_8bit(b), 255.0)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let size = WINDOW.min(h).min(w);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let win = gaussian_window(size.max(1));
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (ma, oh, ow) = filter(a, h, w, &win);
    let (mb, ..) = filter(b, h, w, &win);
    let (saa, ..) = filter(&prod(a, a), h, w, &win);
    let (sbb, ..) = filter(&prod(b, b), h, w, &win);
    let (sab, ..) = filter(&prod(a, b), h, w, &win);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let va = saa[i] - ma[i] * ma[i];
        let vb = sbb[i] - mb[i] * mb[i];
        let cov = sab[i] - ma[i] * mb[i];
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        let l_i = (2.0 * ma[i] * mb[i] + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
        cs += cs_i;
        ssim += l_i * cs_i;
    }
    (ssim / n, cs / n)
}

fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of scales used for an image whose smaller side is `min_dim`.
pub fn ms_ssim_scales(min_dim: usize) -> usize {
    (1..=5).rev().find(|&s| min_dim >= 10 << (s - 1)).unwrap_or(1)
}

/// Multi-scale SSIM of two `[0, 1]` images, averaged over channels.
///
/// Images smaller than 160 pixels on a side use fewer scales, with the
/// remaining weights renormalized.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_same("ms_ssim", a.shape(), b.shape())?;
    let s = a.shape();
    if a.is_empty() {
        return Err(Error::invalid("ms_ssim of empty images"));
    }
    let scales = ms_ssim_scales(s.h.min(s.w));
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * s.plane();
            let mut pa = a.data()[off..off + s.plane()].to_vec();
            let mut pb = b.data()[off..off + s.plane()].to_vec();
            let (mut h, mut w) = (s.h, s.w);
            let mut score = 1.0;
            for (i, wt) in weights.iter().enumerate() {
                let (ssim, cs) = ssim_terms(&pa, &pb, h, w);
                let term = if i + 1 == scales { ssim } else { cs };
                score *= term.max(0.0).powf(wt / wsum);
                if i + 1 < scales {
                    let (da, nh, nw) = downsample(&pa, h, w);
                    let (db, ..) = downsample(&pb, h, w);
                    pa = da;
                    pb = db;
                    h = nh;
                    w = nw;
                }
            }
            total += score;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate and checks the curve invariants.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp.is_finite() && p.bpp > 0.0 && p.psnr_db.is_finite() && p.ms_ssim.is_finite()) {
                return Err(Error::invalid(format!("invalid RD point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::invalid("RD curve needs strictly increasing bpp"));
        }
        Ok(Self { label: label.into(), points })
    }

    /// CSV rows `label,bpp,psnr_db,ms_ssim` without a header.
    pub fn to_csv_rows(&self) -> String {
        self.points
            .iter()
            .map(|p| format!("{},{:.6},{:.6},{:.6}\n", self.label, p.bpp, p.psnr_db, p.ms_ssim))
            .collect()
    }
}

pub const RD_CSV_HEADER: &str = "label,bpp,psnr_db,ms_ssim";

/// Least-squares cubic through `(x, y)`, returned lowest order first.
fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let m = DMatrix::from_fn(x.len(), 4, |i, j| x[i].powi(j as i32));
    let v = DVector::from_column_slice(y);
    let sol = m
        .svd(true, true)
        .solve(&v, 1e-12)
        .map_err(|e| Error::invalid(format!("polynomial fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Which quality column of the curves the deltas are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

/// Bjøntegaard deltas of `b` relative to `a` on PSNR: `(bd_rate_percent,
/// bd_psnr_db)`.
pub fn bd_metrics(a: &RdCurve, b: &RdCurve) -> Result<(f64, f64)> {
    bd_metrics_on(a, b, Quality::Psnr)
}

/// Bjøntegaard deltas on a chosen quality column. Both integrals run over
/// the intersection of the two curves' ranges.
pub fn bd_metrics_on(a: &RdCurve, b: &RdCurve, quality: Quality) -> Result<(f64, f64)> {
    for c in [a, b] {
        if c.points.len() < 4 {
            return Err(Error::invalid(format!("curve `{}` has {} points; at least 4 needed", c.label, c.points.len())));
        }
    }
    let q = |p: &RdPoint| match quality {
        Quality::Psnr => p.psnr_db,
        Quality::MsSsim => p.ms_ssim,
    };
    let lr = |c: &RdCurve| c.points.iter().map(|p| p.bpp.log10()).collect::<Vec<_>>();
    let qs = |c: &RdCurve| c.points.iter().map(q).collect::<Vec<_>>();
    let (ra, rb, qa, qb) = (lr(a), lr(b), qs(a), qs(b));
    let range = |v: &[f64]| (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));

    let (lo, hi) = {
        let (a0, a1) = range(&ra);
        let (b0, b1) = range(&rb);
        (a0.max(b0), a1.min(b1))
    };
    if hi <= lo {
        return Err(Error::invalid("curves do not overlap in rate"));
    }
    let pa = fit_cubic(&ra, &qa)?;
    let pb = fit_cubic(&rb, &qb)?;
    let bd_q = (integral(&pb, lo, hi) - integral(&pa, lo, hi)) / (hi - lo);

    let (qlo, qhi) = {
        let (a0, a1) = range(&qa);
        let (b0, b1) = range(&qb);
        (a0.max(b0), a1.min(b1))
    };
    if qhi <= qlo {
        return Err(Error::invalid("curves do not overlap in quality"));
    }
    let ia = fit_cubic(&qa, &ra)?;
    let ib = fit_cubic(&qb, &rb)?;
    let d = (integral(&ib, qlo, qhi) - integral(&ia, qlo, qhi)) / (qhi - qlo);
    let bd_rate = (10f64.powf(d) - 1.0) * 100.0;
    Ok((bd_rate, bd_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| f(c, y, x))
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |_, _, _| 0.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        let b = img(4, 4, |_, _, _| 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-4);
        let c = img(4, 4, |_, _, _| 2.0);
        let drop = psnr(&a, &b, 255.0).unwrap() - psnr(&a, &c, 255.0).unwrap();
        assert!((drop - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = img(64, 48, |c, y, x| ((x * 3 + y * 5 + c) % 17) as f64 / 16.0);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let b = a.map(|v| (v * 0.9 + 0.03).min(1.0));
        let ab = ms_ssim(&a, &b).unwrap();
        assert_eq!(ab, ms_ssim(&b, &a).unwrap());
        assert!(ab < 1.0 && ab > 0.5);
        let inv = a.map(|v| 1.0 - v);
        assert!(ms_ssim(&a, &inv).unwrap() < 0.5);
    }

    #[test]
    fn scale_selection() {
        assert_eq!(ms_ssim_scales(256), 5);
        assert_eq!(ms_ssim_scales(160), 5);
        assert_eq!(ms_ssim_scales(159), 4);
        assert_eq!(ms_ssim_scales(32), 2);
        assert_eq!(ms_ssim_scales(3), 1);
    }

    fn curve(label: &str, shift_db: f64, rate_mul: f64) -> RdCurve {
        let pts = [(0.1, 28.0), (0.25, 30.5), (0.5, 33.0), (0.9, 35.2), (1.4, 37.0)]
            .iter()
            .map(|&(r, q)| RdPoint { bpp: r * rate_mul, psnr_db: q + shift_db, ms_ssim: 0.9 })
            .collect();
        RdCurve::new(label, pts).unwrap()
    }

    #[test]
    fn bd_examples() {
        let a = curve("a", 0.0, 1.0);
        let (r, p) = bd_metrics(&a, &a).unwrap();
        assert!(r.abs() < 1e-9 && p.abs() < 1e-9);
        let (_, p) = bd_metrics(&a, &curve("b", 1.0, 1.0)).unwrap();
        assert!((p - 1.0).abs() < 1e-6);
        let (r, _) = bd_metrics(&a, &curve("c", 0.0, 2.0)).unwrap();
        assert!((r - 100.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn bd_needs_four_points() {
        let a = RdCurve::new("a", vec![RdPoint { bpp: 1.0, psnr_db: 30.0, ms_ssim: 0.9 }]).unwrap();
        assert!(bd_metrics(&a, &a).is_err());
    }
}
