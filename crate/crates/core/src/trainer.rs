//! Rate-distortion training at desk scale.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hft::{BoundParams, ModelParams};
use crate::image_io::load_image;
use crate::model::CodecModel;
use crate::quant::QuantMode;
use crate::tensor::{ensure_same, Shape, Tensor};

/// Distortion weights of the standard rate points, lowest rate first.
pub const LAMBDA_GRID: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483];

/// Scale that puts the `[0, 1]` MSE on the 8-bit scale.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdLossBreakdown {
    pub total: f64,
    /// Mean squared error per value on the `[0, 1]` scale.
    pub mse: f64,
    pub bpp_y: f64,
    pub bpp_z: f64,
    pub lambda: f64,
}

impl RdLossBreakdown {
    fn from_parts(mse: f64, bpp_y: f64, bpp_z: f64, lambda: f64) -> Self {
        Self { total: lambda * MSE_SCALE * mse + bpp_y + bpp_z, mse, bpp_y, bpp_z, lambda }
    }

    pub fn bpp(&self) -> f64 {
        self.bpp_y + self.bpp_z
    }
}

fn default_crop() -> usize {
    256
}

fn default_quant() -> QuantMode {
    QuantMode::Hybrid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_quant")]
    pub quant: QuantMode,
}

impl TrainConfig {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch == 0 || self.crop == 0 {
            return Err(Error::invalid("batch and crop must be positive"));
        }
        if self.crop % stride != 0 {
            return Err(Error::invalid(format!("crop {} is not divisible by the model stride {stride}", self.crop)));
        }
        if self.quant == QuantMode::Hard {
            return Err(Error::invalid("training needs a differentiable quantization mode"));
        }
        Ok(())
    }
}

fn valid_mask(shape: Shape, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(shape, |_, _, y, x| if y < h && x < w { 1.0 } else { 0.0 })
}

/// RD loss on the tape. `valid` is the unpadded `(h, w)` of every image in
/// the batch; the MSE ignores the padding.
pub fn rd_loss_on_tape(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    bits_y: Var,
    bits_z: Var,
    lambda: f64,
    valid: (usize, usize),
) -> Result<(Var, RdLossBreakdown)> {
    let s = tape.shape(x);
    ensure_same("rd_loss", s, tape.shape(x_hat))?;
    let (h, w) = valid;
    if h == 0 || w == 0 || h > s.h || w > s.w {
        return Err(Error::invalid(format!("valid region {h}x{w} outside {s}")));
    }
    let mut diff = tape.sub(x_hat, x)?;
    if (h, w) != (s.h, s.w) {
        let m = tape.constant(valid_mask(s, h, w));
        diff = tape.mul(diff, m)?;
    }
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let pixels = (s.n * h * w) as f64;
    let mse = tape.scale(sse, 1.0 / (pixels * s.c as f64));
    let by = tape.scale(bits_y, 1.0 / pixels);
    let bz = tape.scale(bits_z, 1.0 / pixels);
    let d = tape.scale(mse, lambda * MSE_SCALE);
    let r = tape.add(by, bz)?;
    let total = tape.add(d, r)?;
    let parts = RdLossBreakdown::from_parts(tape.value(mse).item(), tape.value(by).item(), tape.value(bz).item(), lambda);
    Ok((total, parts))
}

/// RD loss of a reconstruction given bit counts; `pixel_count` is the
/// unpadded number of pixels over the whole batch.
pub fn rd_loss(x: &Tensor, x_hat: &Tensor, bits_y: f64, bits_z: f64, lambda: f64, pixel_count: usize) -> Result<RdLossBreakdown> {
    ensure_same("rd_loss", x.shape(), x_hat.shape())?;
    if pixel_count == 0 {
        return Err(Error::invalid("pixel_count must be positive"));
    }
    let mse = crate::metrics::mse(x, x_hat)?;
    let p = pixel_count as f64;
    Ok(RdLossBreakdown::from_parts(mse, bits_y / p, bits_z / p, lambda))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with the given gradients. Parameters without a
    /// gradient entry keep their values and moments.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / b1t;
                let vh = *vv / b2t;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Gradients of the RD loss on `batch` with respect to every parameter,
/// plus the loss breakdown.
pub fn loss_and_grads(
    model: &CodecModel,
    batch: &Tensor,
    lambda: f64,
    mode: QuantMode,
    seed: u64,
) -> Result<(RdLossBreakdown, BTreeMap<String, Tensor>)> {
    let s = batch.shape();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, true);
    let x = tape.constant(batch.clone());
    let out = model.forward(&mut tape, &bound, x, mode, seed)?;
    let (loss, parts) = rd_loss_on_tape(&mut tape, x, out.x_hat, out.bits_y, out.bits_z, lambda, (s.h, s.w))?;
    if !parts.total.is_finite() || !tape.value(loss).item().is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, total: parts.total, mse: parts.mse, bpp_y: parts.bpp_y, bpp_z: parts.bpp_z });
    }
    let grads = tape.backward(loss)?;
    let map = bound.iter().map(|(name, &v)| (name.clone(), grads.wrt(&tape, v))).collect();
    Ok((parts, map))
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One forward, backward and optimizer update on `batch` (values in
/// `[0, 1]`). The returned breakdown is the loss before the update.
pub fn train_step(model: &mut CodecModel, adam: &mut Adam, batch: &Tensor, config: &TrainConfig, step: usize) -> Result<RdLossBreakdown> {
    if batch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("training batch must lie in [0, 1]"));
    }
    let (parts, grads) = loss_and_grads(model, batch, config.lambda, config.quant, step_seed(config.seed, step))
        .map_err(|e| match e {
            Error::NonFiniteLoss { total, mse, bpp_y, bpp_z, .. } => Error::NonFiniteLoss { step, total, mse, bpp_y, bpp_z },
            e => e,
        })?;
    adam.lr = config.lr;
    adam.step(&mut model.params, &grads);
    Ok(parts)
}

/// A `crop x crop` window at a random offset, replicate-padding images that
/// are smaller than the crop.
pub fn random_crop(img: &Tensor, crop: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let s = img.shape();
    let padded = img.pad_replicate(s.h.max(crop), s.w.max(crop))?;
    let ps = padded.shape();
    let oy = rng.gen_range(0..=ps.h - crop);
    let ox = rng.gen_range(0..=ps.w - crop);
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, crop, crop), |n, c, y, x| padded.at(n, c, y + oy, x + ox)))
}

/// Loads an image and takes a seeded random crop.
pub fn load_crop(path: &Path, crop: usize, seed: u64) -> Result<Tensor> {
    let img = load_image(path)?;
    random_crop(&img, crop, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub const TRAIN_LOG_HEADER: &str = "step,mse,bpp_y,bpp_z,total";

/// Runs `config.steps` updates on random crops of `images`, optionally
/// writing one CSV row per step to `log`.
pub fn train(model: &mut CodecModel, images: &[Tensor], config: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<Vec<RdLossBreakdown>> {
    if images.is_empty() {
        return Err(Error::invalid("training needs at least one image"));
    }
    config.validate(1 << model.config.stages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr);
    if let Some(w) = log.as_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
    }
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let crops = (0..config.batch)
            .map(|_| {
                let i = rng.gen_range(0..images.len());
                random_crop(&images[i], config.crop, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = crops.iter().collect();
        let batch = Tensor::concat_batch(&refs)?;
        let parts = train_step(model, &mut adam, &batch, config, step)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step},{:.8},{:.6},{:.6},{:.6}", parts.mse, parts.bpp_y, parts.bpp_z, parts.total)?;
        }
        history.push(parts);
    }
    Ok(history)
}
