//! Entropy models.
//!
//! The hyper-latent `z` is coded with a learned factorized prior, one
//! monotone cumulative per channel. The latent `y` is coded with a
//! conditional Gaussian whose mean and scale come from the hyper features
//! plus a context model that walks the latent in a fixed slice order:
//! channel groups in sequence, and inside each group the checkerboard
//! anchors before the non-anchors. Parameters for a slice only ever depend
//! on slices that come before it, which is what lets the decoder rebuild
//! them.

use crate::autograd::{normal_cdf, sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::hft::{BoundParams, HftConfig, ModelParams, LEAKY_SLOPE};
use crate::tensor::{Shape, Tensor};

/// Lower bound of the predicted Gaussian scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Smallest probability any coded symbol may have, `2^-15`.
pub const PMF_FLOOR: f64 = 1.0 / 32768.0;

/// Default coding window of integer symbols; widened per channel to cover
/// every symbol actually present.
pub const DEFAULT_WINDOW: (i32, i32) = (-64, 63);

/// Widest alphabet a channel window may span.
pub const MAX_ALPHABET: usize = 8192;

/// Kernel of the checkerboard spatial context convolution.
pub const CONTEXT_KERNEL: usize = 3;

const PRIOR_WIDTH: usize = 3;

// ---------------------------------------------------------------------------
// pmf helpers

/// Floors a raw pmf and renormalizes it to sum to one.
///
/// The floor is applied as a mixture with the uniform distribution, so every
/// entry ends at least `PMF_FLOOR` and the total stays exactly one.
pub fn finalize_pmf(raw: &[f64]) -> Result<Vec<f64>> {
    let n = raw.len();
    if n == 0 || n > MAX_ALPHABET {
        return Err(Error::Pmf(format!("alphabet size {n} outside 1..={MAX_ALPHABET}")));
    }
    let total: f64 = raw.iter().map(|p| p.max(0.0)).sum();
    let spare = 1.0 - n as f64 * PMF_FLOOR;
    if !(total.is_finite() && total > 0.0) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(raw.iter().map(|p| PMF_FLOOR + spare * p.max(0.0) / total).collect())
}

/// Integer window per channel: the default window widened to cover every
/// symbol in that channel.
pub fn channel_windows(symbols: &Tensor) -> Result<Vec<(i32, i32)>> {
    let s = symbols.shape();
    let mut out = vec![DEFAULT_WINDOW; s.c];
    for n in 0..s.n {
        for (c, win) in out.iter_mut().enumerate() {
            let plane = &symbols.data()[(n * s.c + c) * s.plane()..][..s.plane()];
            for &v in plane {
                if !v.is_finite() || v.abs() > i32::MAX as f64 / 2.0 {
                    return Err(Error::Pmf(format!("symbol {v} in channel {c} cannot be coded")));
                }
                win.0 = win.0.min(v as i32);
                win.1 = win.1.max(v as i32);
            }
        }
    }
    for (c, w) in out.iter().enumerate() {
        if (w.1 - w.0 + 1) as usize > MAX_ALPHABET {
            return Err(Error::Pmf(format!("channel {c} spans [{}, {}], wider than {MAX_ALPHABET}", w.0, w.1)));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// factorized prior

/// A per-channel cumulative distribution over the real line.
pub trait CumulativeModel {
    fn channels(&self) -> usize;

    fn cdf(&self, channel: usize, x: f64) -> f64;

    /// Mass of the unit bin centred on `v`.
    fn likelihood(&self, channel: usize, v: f64) -> f64 {
        self.cdf(channel, v + 0.5) - self.cdf(channel, v - 0.5)
    }
}

/// Learned factorized prior with per-channel widths `1 -> 3 -> 3 -> 1`.
///
/// Matrices pass through a softplus so every layer is non-decreasing, the
/// gates `x + tanh(a) * tanh(x)` keep it monotone, and a final sigmoid maps
/// to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    channels: usize,
    h1: Vec<f64>,
    b1: Vec<f64>,
    a1: Vec<f64>,
    h2: Vec<f64>,
    b2: Vec<f64>,
    a2: Vec<f64>,
    h3: Vec<f64>,
    b3: Vec<f64>,
}

/// Parameter names and shapes of the factorized prior over `channels`.
pub fn prior_layout(channels: usize) -> Vec<(String, Shape)> {
    let w = PRIOR_WIDTH * channels;
    vec![
        ("prior.h1".into(), Shape::new(w, 1, 1, 1)),
        ("prior.b1".into(), Shape::vector(w)),
        ("prior.a1".into(), Shape::vector(w)),
        ("prior.h2".into(), Shape::new(w, PRIOR_WIDTH, 1, 1)),
        ("prior.b2".into(), Shape::vector(w)),
        ("prior.a2".into(), Shape::vector(w)),
        ("prior.h3".into(), Shape::new(channels, PRIOR_WIDTH, 1, 1)),
        ("prior.b3".into(), Shape::vector(channels)),
    ]
}

impl FactorizedPrior {
    pub fn from_params(params: &ModelParams, channels: usize) -> Result<Self> {
        let mut vals = Vec::new();
        for (name, shape) in prior_layout(channels) {
            let t = params.get(&name).ok_or_else(|| Error::MissingParam { layer: name.clone() })?;
            if t.shape() != shape {
                return Err(Error::ParamShape { layer: name, expected: shape, found: t.shape() });
            }
            vals.push(t.data().to_vec());
        }
        let mut it = vals.into_iter();
        let mut next = || it.next().unwrap();
        let h1 = next().into_iter().map(softplus).collect();
        let b1 = next();
        let a1 = next().into_iter().map(f64::tanh).collect();
        let h2 = next().into_iter().map(softplus).collect();
        let b2 = next();
        let a2 = next().into_iter().map(f64::tanh).collect();
        let h3 = next().into_iter().map(softplus).collect();
        let b3 = next();
        Ok(Self { channels, h1, b1, a1, h2, b2, a2, h3, b3 })
    }

    /// Pre-sigmoid value of the cumulative at `x`.
    pub fn logit(&self, c: usize, x: f64) -> f64 {
        const W: usize = PRIOR_WIDTH;
        let mut l1 = [0.0; W];
        for (j, v) in l1.iter_mut().enumerate() {
            let i = c * W + j;
            let t = self.h1[i] * x + self.b1[i];
            *v = t + self.a1[i] * t.tanh();
        }
        let mut l2 = [0.0; W];
        for (j, v) in l2.iter_mut().enumerate() {
            let i = c * W + j;
            let mut t = self.b2[i];
            for (k, &u) in l1.iter().enumerate() {
                t += self.h2[i * W + k] * u;
            }
            *v = t + self.a2[i] * t.tanh();
        }
        let mut t = self.b3[c];
        for (k, &u) in l2.iter().enumerate() {
            t += self.h3[c * W + k] * u;
        }
        t
    }
}

impl CumulativeModel for FactorizedPrior {
    fn channels(&self) -> usize {
        self.channels
    }

    fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.logit(channel, x))
    }

    fn likelihood(&self, channel: usize, v: f64) -> f64 {
        let u = self.logit(channel, v + 0.5);
        let l = self.logit(channel, v - 0.5);
        // evaluate on the side of the sigmoid where the difference is precise
        let s = if u + l > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * u) - sigmoid(s * l)).abs()
    }
}

/// Bits of an integer-valued hyper-latent under a factorized model,
/// `sum(-log2 p)` with `p` floored at [`PMF_FLOOR`].
pub fn factorized_rate(z_hat: &Tensor, model: &impl CumulativeModel) -> Result<f64> {
    let s = z_hat.shape();
    if s.c != model.channels() {
        return Err(Error::invalid(format!("{} channels but the prior has {}", s.c, model.channels())));
    }
    let mut bits = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for &v in &z_hat.data()[(n * s.c + c) * s.plane()..][..s.plane()] {
                if v.fract() != 0.0 || !v.is_finite() {
                    return Err(Error::invalid(format!("factorized_rate needs integer inputs, got {v}")));
                }
                bits -= model.likelihood(c, v).max(PMF_FLOOR).log2();
            }
        }
    }
    Ok(bits)
}

/// Coding pmf of one channel over the integer window `[lo, hi]`.
pub fn factorized_pmf(model: &impl CumulativeModel, channel: usize, window: (i32, i32)) -> Result<Vec<f64>> {
    let raw: Vec<f64> = (window.0..=window.1).map(|v| model.likelihood(channel, v as f64)).collect();
    finalize_pmf(&raw)
}

/// Training-time factorized bits of `z` (noisy or rounded) on the tape.
pub fn factorized_bits(tape: &mut Tape, params: &BoundParams, z: Var) -> Result<Var> {
    let c = tape.shape(z).c;
    let layout = prior_layout(c);
    let mut v = Vec::new();
    for (name, shape) in &layout {
        v.push(params.get(tape, name, *shape)?);
    }
    let (h1, b1, a1, h2, b2, a2, h3, b3) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
    let h1 = tape.softplus(h1);
    let h2 = tape.softplus(h2);
    let h3 = tape.softplus(h3);
    let a1 = tape.tanh(a1);
    let a2 = tape.tanh(a2);
    let logit = |tape: &mut Tape, x: Var| -> Result<Var> {
        let t = tape.grouped_pointwise(x, h1, Some(b1), c)?;
        let g = tape.tanh(t);
        let g = tape.channel_mul(g, a1)?;
        let t = tape.add(t, g)?;
        let t = tape.grouped_pointwise(t, h2, Some(b2), c)?;
        let g = tape.tanh(t);
        let g = tape.channel_mul(g, a2)?;
        let t = tape.add(t, g)?;
        tape.grouped_pointwise(t, h3, Some(b3), c)
    };
    let up = tape.add_scalar(z, 0.5);
    let lo = tape.add_scalar(z, -0.5);
    let u = logit(tape, up)?;
    let l = logit(tape, lo)?;
    let sign = tape
        .value(u)
        .zip_map(tape.value(l), "prior", |a, b| if a + b > 0.0 { -1.0 } else { 1.0 })?;
    let sign = tape.constant(sign);
    let su = tape.mul(u, sign)?;
    let sl = tape.mul(l, sign)?;
    let pu = tape.sigmoid(su);
    let pl = tape.sigmoid(sl);
    let p = tape.sub(pu, pl)?;
    let p = tape.abs(p);
    let p = tape.clamp_min(p, PMF_FLOOR);
    Ok(tape.neg_log2_sum(p))
}

// ---------------------------------------------------------------------------
// conditional Gaussian

/// Mass of the unit bin around a residual `r` under `N(0, sigma^2)`.
pub fn gaussian_likelihood(r: f64, sigma: f64) -> f64 {
    let a = r.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Bits of `value` under `N(mu, sigma^2)` discretized to unit bins.
pub fn gaussian_bits(value: f64, mu: f64, sigma: f64) -> f64 {
    -gaussian_likelihood(value - mu, sigma).max(PMF_FLOOR).log2()
}

/// Coding pmf of an integer residual over `[lo, hi]`.
pub fn gaussian_pmf(sigma: f64, window: (i32, i32)) -> Result<Vec<f64>> {
    let raw: Vec<f64> = (window.0..=window.1).map(|r| gaussian_likelihood(r as f64, sigma)).collect();
    finalize_pmf(&raw)
}

/// Bits of `y` (noisy or quantized) under the predicted Gaussian, on the
/// tape. The scale is clamped at [`SIGMA_MIN`].
pub fn gaussian_rate(tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let sigma = tape.clamp_min(sigma, SIGMA_MIN);
    let r = tape.sub(y, mu)?;
    let a = tape.abs(r);
    let na = tape.scale(a, -1.0);
    let hi = tape.add_scalar(na, 0.5);
    let lo = tape.add_scalar(na, -0.5);
    let hi = tape.div(hi, sigma)?;
    let lo = tape.div(lo, sigma)?;
    let hi = tape.normal_cdf(hi);
    let lo = tape.normal_cdf(lo);
    let p = tape.sub(hi, lo)?;
    let p = tape.clamp_min(p, PMF_FLOOR);
    Ok(tape.neg_log2_sum(p))
}

// ---------------------------------------------------------------------------
// context model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Anchor,
    NonAnchor,
}

impl Parity {
    /// Anchors sit where `y + x` is even.
    pub fn of(y: usize, x: usize) -> Self {
        if (y + x) % 2 == 0 {
            Parity::Anchor
        } else {
            Parity::NonAnchor
        }
    }
}

/// One step of the decoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub group: usize,
    pub parity: Parity,
    /// First latent channel of the group.
    pub channel_start: usize,
    pub channels: usize,
}

/// Fixed slice order over channel groups and checkerboard parities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSchedule {
    groups: Vec<usize>,
    slices: Vec<Slice>,
}

impl ContextSchedule {
    pub fn new(groups: &[usize]) -> Result<Self> {
        if groups.is_empty() || groups.contains(&0) {
            return Err(Error::invalid("channel groups must be non-empty and positive"));
        }
        let mut slices = Vec::with_capacity(2 * groups.len());
        let mut start = 0;
        for (g, &s) in groups.iter().enumerate() {
            for parity in [Parity::Anchor, Parity::NonAnchor] {
                slices.push(Slice { group: g, parity, channel_start: start, channels: s });
            }
            start += s;
        }
        Ok(Self { groups: groups.to_vec(), slices })
    }

    pub fn from_config(config: &HftConfig) -> Result<Self> {
        Self::new(&config.groups())
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn latent_channels(&self) -> usize {
        self.groups.iter().sum()
    }

    /// Index of the slice that owns latent element `(c, y, x)`.
    pub fn slice_of(&self, c: usize, y: usize, x: usize) -> usize {
        let g = self
            .slices
            .iter()
            .step_by(2)
            .position(|s| c >= s.channel_start && c < s.channel_start + s.channels)
            .expect("channel inside the latent");
        2 * g + usize::from(Parity::of(y, x) == Parity::NonAnchor)
    }

    /// 0/1 mask of the slice's positions over a group-shaped tensor.
    pub fn mask(&self, index: usize, n: usize, h: usize, w: usize) -> Tensor {
        let s = self.slices[index];
        Tensor::from_fn(Shape::new(n, s.channels, h, w), |_, _, y, x| {
            if Parity::of(y, x) == s.parity {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Input width of the fusion network of group `g`.
    pub fn fusion_inputs(&self, g: usize) -> usize {
        2 * self.latent_channels() + self.groups[..g].iter().sum::<usize>() + 2 * self.groups[g]
    }
}

/// Parameter names and shapes of the context model.
pub fn context_layout(schedule: &ContextSchedule) -> Vec<(String, Shape)> {
    let k = CONTEXT_KERNEL;
    let mut out = Vec::new();
    for (g, &s) in schedule.groups().iter().enumerate() {
        let hid = 2 * s;
        out.push((format!("ctx.g{g}.sp.w"), Shape::new(2 * s, s, k, k)));
        out.push((format!("ctx.g{g}.f1.w"), Shape::new(hid, schedule.fusion_inputs(g), 1, 1)));
        out.push((format!("ctx.g{g}.f1.b"), Shape::vector(hid)));
        out.push((format!("ctx.g{g}.f2.w"), Shape::new(2 * s, hid, 1, 1)));
        out.push((format!("ctx.g{g}.f2.b"), Shape::vector(2 * s)));
    }
    out
}

/// Latent values already reconstructed, one masked group-shaped tensor per
/// completed slice.
#[derive(Debug, Clone, Default)]
pub struct KnownSlices {
    parts: Vec<Var>,
}

impl KnownSlices {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Records the next slice; `part` must already be zero outside it.
    pub fn push(&mut self, part: Var) {
        self.parts.push(part);
    }

    /// The first `count` slices of a complete latent.
    pub fn from_full(tape: &mut Tape, schedule: &ContextSchedule, y_hat: &Tensor, count: usize) -> Result<Self> {
        let s = y_hat.shape();
        if s.c != schedule.latent_channels() {
            return Err(Error::invalid(format!("latent has {} channels, schedule expects {}", s.c, schedule.latent_channels())));
        }
        let mut known = Self::new();
        for (i, slice) in schedule.slices().iter().enumerate().take(count) {
            let g = y_hat.channels(slice.channel_start, slice.channels)?;
            let m = schedule.mask(i, s.n, s.h, s.w);
            let part = g.zip_map(&m, "mask", |a, b| a * b)?;
            known.push(tape.constant(part));
        }
        Ok(known)
    }
}

/// Mean and scale predicted for slice `index` (group-shaped; only the
/// slice's own positions are meaningful).
///
/// Fails with a causality error unless exactly the slices before `index`
/// are known.
pub fn context_params(
    tape: &mut Tape,
    params: &BoundParams,
    schedule: &ContextSchedule,
    features: Var,
    known: &KnownSlices,
    index: usize,
) -> Result<(Var, Var)> {
    if index >= schedule.slices().len() {
        return Err(Error::invalid(format!("slice {index} out of range")));
    }
    if known.len() != index {
        return Err(Error::Causality { requested: index, available: known.len() });
    }
    let fs = tape.shape(features);
    let m = schedule.latent_channels();
    if fs.c != 2 * m {
        return Err(Error::layer("context", format!("features have {} channels, expected {}", fs.c, 2 * m)));
    }
    let slice = schedule.slices()[index];
    let (g, s) = (slice.group, slice.channels);
    let mut inputs = vec![features];
    for h in 0..g {
        inputs.push(tape.add(known.parts[2 * h], known.parts[2 * h + 1])?);
    }
    let spatial = match slice.parity {
        // anchors see no spatial context; the product with a zero input is skipped
        Parity::Anchor => tape.constant(Tensor::zeros(Shape::new(fs.n, 2 * s, fs.h, fs.w))),
        Parity::NonAnchor => {
            let w = params.get(tape, &format!("ctx.g{g}.sp.w"), Shape::new(2 * s, s, CONTEXT_KERNEL, CONTEXT_KERNEL))?;
            tape.conv2d(known.parts[2 * g], w, None, 1, CONTEXT_KERNEL / 2)?
        }
    };
    inputs.push(spatial);
    let x = tape.concat_channels(&inputs)?;
    let hid = 2 * s;
    let w1 = params.get(tape, &format!("ctx.g{g}.f1.w"), Shape::new(hid, schedule.fusion_inputs(g), 1, 1))?;
    let b1 = params.get(tape, &format!("ctx.g{g}.f1.b"), Shape::vector(hid))?;
    let w2 = params.get(tape, &format!("ctx.g{g}.f2.w"), Shape::new(2 * s, hid, 1, 1))?;
    let b2 = params.get(tape, &format!("ctx.g{g}.f2.b"), Shape::vector(2 * s))?;
    let h = tape.conv2d(x, w1, Some(b1), 1, 0)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let out = tape.conv2d(h, w2, Some(b2), 1, 0)?;
    let mu = tape.slice_channels(out, 0, s)?;
    let raw = tape.slice_channels(out, s, s)?;
    let sigma = tape.softplus(raw);
    let sigma = tape.clamp_min(sigma, SIGMA_MIN);
    Ok((mu, sigma))
}

/// What the walker hands to the per-slice callback.
#[derive(Debug, Clone, Copy)]
pub struct SliceStep<'a> {
    pub index: usize,
    pub slice: Slice,
    pub mu: Var,
    pub sigma: Var,
    pub mask: &'a Tensor,
}

/// Result of walking the whole latent.
#[derive(Debug, Clone, Copy)]
pub struct LatentWalk {
    pub y_hat: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Walks every slice in order. For each one it predicts `(mu, sigma)` from
/// what is already known and asks `fill` for the slice's reconstructed
/// values (group-shaped; entries outside the slice are ignored).
///
/// Training, the encoder and the decoder all go through this function, so
/// they share one definition of the decoding order.
pub fn walk_latent<F>(
    tape: &mut Tape,
    params: &BoundParams,
    schedule: &ContextSchedule,
    features: Var,
    mut fill: F,
) -> Result<LatentWalk>
where
    F: FnMut(&mut Tape, SliceStep<'_>) -> Result<Var>,
{
    let fs = tape.shape(features);
    let mut known = KnownSlices::new();
    let mut mus = Vec::new();
    let mut sigmas = Vec::new();
    let mut masks = Vec::new();
    for (index, &slice) in schedule.slices().iter().enumerate() {
        let (mu, sigma) = context_params(tape, params, schedule, features, &known, index)?;
        let mask = schedule.mask(index, fs.n, fs.h, fs.w);
        let value = fill(tape, SliceStep { index, slice, mu, sigma, mask: &mask })?;
        let m = tape.constant(mask.clone());
        known.push(tape.mul(value, m)?);
        mus.push(tape.mul(mu, m)?);
        sigmas.push(tape.mul(sigma, m)?);
        masks.push(mask);
    }
    let mut y_parts = Vec::new();
    let mut mu_parts = Vec::new();
    let mut sigma_parts = Vec::new();
    for g in 0..schedule.groups().len() {
        y_parts.push(tape.add(known.parts[2 * g], known.parts[2 * g + 1])?);
        mu_parts.push(tape.add(mus[2 * g], mus[2 * g + 1])?);
        sigma_parts.push(tape.add(sigmas[2 * g], sigmas[2 * g + 1])?);
    }
    Ok(LatentWalk {
        y_hat: tape.concat_channels(&y_parts)?,
        mu: tape.concat_channels(&mu_parts)?,
        sigma: tape.concat_channels(&sigma_parts)?,
    })
}
