//! The complete codec network: transforms, hyperprior and context model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::entropy::{self, ContextSchedule, LatentWalk};
use crate::error::Result;
use crate::hft::{self, BoundParams, HftConfig, HyperDirection, ModelParams, StagePlan};
use crate::quant::{quantize, QuantMode};
use crate::tensor::{Shape, Tensor};

const NOISE_STREAM_Z: u64 = 1;
const NOISE_STREAM_Y: u64 = 2;

/// Every parameter of the codec with its shape.
pub fn parameter_layout(config: &HftConfig) -> Result<Vec<(String, Shape)>> {
    config.validate()?;
    let schedule = ContextSchedule::from_config(config)?;
    let mut out = hft::transform_layout(config);
    out.extend(entropy::context_layout(&schedule));
    out.extend(entropy::prior_layout(config.hyper_channels));
    Ok(out)
}

/// Tape variables produced by one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub x_hat: Var,
    pub bits_y: Var,
    pub bits_z: Var,
    pub y: Var,
    pub z: Var,
    pub walk: LatentWalk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub config: HftConfig,
    pub params: ModelParams,
}

impl CodecModel {
    /// A freshly initialized model; weights depend only on `seed`.
    pub fn init(config: HftConfig, seed: u64) -> Result<Self> {
        let layout = parameter_layout(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        // Prior matrices start so that the cumulative spans roughly ten units.
        let prior_scale = 10f64.powf(0.25);
        for (name, shape) in &layout {
            let t = if name.ends_with(".b") || name.starts_with("prior.b") {
                if name.starts_with("prior.b") {
                    Tensor::from_fn(*shape, |_, _, _, _| rng.gen::<f64>() - 0.5)
                } else {
                    Tensor::zeros(*shape)
                }
            } else if name.starts_with("prior.a") {
                Tensor::zeros(*shape)
            } else if name.starts_with("prior.h") {
                let fan = if name == "prior.h1" { 1.0 } else { 3.0 };
                Tensor::full(*shape, (1.0 / prior_scale / fan).exp_m1().ln())
            } else {
                let bound = weight_bound(name, *shape);
                Tensor::from_fn(*shape, |_, _, _, _| (2.0 * rng.gen::<f64>() - 1.0) * bound)
            };
            params.insert(name.clone(), t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(config: HftConfig, params: ModelParams) -> Result<Self> {
        params.validate(&parameter_layout(&config)?)?;
        Ok(Self { config, params })
    }

    pub fn schedule(&self) -> Result<ContextSchedule> {
        ContextSchedule::from_config(&self.config)
    }

    pub fn plan(&self, h: usize, w: usize) -> Result<StagePlan> {
        hft::plan_stages(&self.config, (3, h, w))
    }

    /// Training forward pass on a padded batch `x`.
    ///
    /// `seed` drives the quantization noise. Hard mode is allowed only when
    /// parameters are bound without gradients.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, mode: QuantMode, seed: u64) -> Result<ForwardOutput> {
        let s = tape.shape(x);
        let plan = self.plan(s.h, s.w)?;
        let schedule = self.schedule()?;
        let y = hft::analysis(tape, x, bound, &self.config, &plan)?;
        let z = hft::hyper_transform(tape, y, bound, &self.config, &plan, HyperDirection::Analysis)?;
        let zq = quantize(tape, z, mode, None, Some(seed), NOISE_STREAM_Z)?;
        let bits_z = entropy::factorized_bits(tape, bound, zq.rate)?;
        let features = hft::hyper_transform(tape, zq.distortion, bound, &self.config, &plan, HyperDirection::Synthesis)?;
        let noisy = match mode {
            QuantMode::Noise | QuantMode::Hybrid => Some(quantize(tape, y, QuantMode::Noise, None, Some(seed), NOISE_STREAM_Y)?.rate),
            _ => None,
        };
        let walk = entropy::walk_latent(tape, bound, &schedule, features, |tape, step| {
            let source = if mode == QuantMode::Noise { noisy.expect("noise mode draws noise") } else { y };
            let yg = tape.slice_channels(source, step.slice.channel_start, step.slice.channels)?;
            match mode {
                QuantMode::Noise => Ok(yg),
                QuantMode::Ste | QuantMode::Hybrid => Ok(quantize(tape, yg, QuantMode::Ste, Some(step.mu), None, 0)?.distortion),
                QuantMode::Hard => Ok(quantize(tape, yg, QuantMode::Hard, Some(step.mu), None, 0)?.distortion),
            }
        })?;
        let rate_y = noisy.unwrap_or(walk.y_hat);
        let bits_y = entropy::gaussian_rate(tape, rate_y, walk.mu, walk.sigma)?;
        let x_hat = hft::synthesis(tape, walk.y_hat, bound, &self.config, &plan)?;
        Ok(ForwardOutput { x_hat, bits_y, bits_z, y, z, walk })
    }
}

fn weight_bound(name: &str, shape: Shape) -> f64 {
    let k2 = (shape.h * shape.w) as f64;
    let transposed = name.starts_with("gs.s") && name.matches('.').count() == 2 || name.starts_with("hs.");
    let fan_in = if transposed {
        // (c_in, c_out, k, k) with stride 2: each output sees about a quarter
        // of the kernel taps
        shape.n as f64 * k2 / 4.0
    } else {
        shape.c as f64 * k2
    };
    let mut bound = (6.0 / fan_in).sqrt();
    if name.ends_with(".c2.w") {
        bound *= 0.1;
    }
    bound
}
