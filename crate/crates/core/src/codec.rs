//! Encoding images to bitstreams and back.
//!
//! The hyper-latent is coded first under the factorized prior, one table per
//! channel. The latent is coded slice by slice in context-schedule order;
//! inside a slice the order is channel, row, column over the slice's
//! checkerboard positions. Each latent symbol is the residual
//! `round(y - mu)` under a zero-mean Gaussian table of the predicted scale.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::bitstream::Bitstream;
use crate::checkpoint::Checkpoint;
use crate::entropy::{self, FactorizedPrior};
use crate::error::{Error, Result};
use crate::hft::{self, BoundParams, HyperDirection, StagePlan};
use crate::image_io;
use crate::metrics::{self, RdPoint, RD_CSV_HEADER};
use crate::model::CodecModel;
use crate::quant::{quantize_hard, quantize_symbols};
use crate::range_coder::{build_cdf, Cdf, RangeDecoder, RangeEncoder, PRECISION};
use crate::tensor::{Shape, Tensor};

/// Bit accounting of one encoded image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeStats {
    pub width: usize,
    pub height: usize,
    pub z_payload_bits: usize,
    pub y_payload_bits: usize,
    /// Whole file, header included.
    pub file_bits: usize,
    /// `sum(-log2 p)` of the coded symbols under the coding tables.
    pub estimated_bits: f64,
    /// The same sum under the unwindowed model with `p` floored, as used for
    /// the hard-mode training rate.
    pub model_bits: f64,
}

impl EncodeStats {
    pub fn payload_bits(&self) -> usize {
        self.z_payload_bits + self.y_payload_bits
    }

    /// Payload bits per pixel of the unpadded image.
    pub fn bpp(&self) -> f64 {
        self.payload_bits() as f64 / (self.width * self.height) as f64
    }

    pub fn estimated_bpp(&self) -> f64 {
        self.estimated_bits / (self.width * self.height) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// The reconstruction the decoder will produce, cropped and clamped.
    pub x_hat: Tensor,
    pub stats: EncodeStats,
}

struct Prepared {
    plan: StagePlan,
    schedule: entropy::ContextSchedule,
    prior: FactorizedPrior,
}

fn prepare(model: &CodecModel, height: usize, width: usize) -> Result<Prepared> {
    let m = model.config.pad_multiple();
    let plan = model.plan(height.div_ceil(m) * m, width.div_ceil(m) * m)?;
    Ok(Prepared {
        plan,
        schedule: model.schedule()?,
        prior: FactorizedPrior::from_params(&model.params, model.config.hyper_channels)?,
    })
}

fn checked_image(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!("expected a 1x3xHxW image, got {s}")));
    }
    if s.h > u32::MAX as usize || s.w > u32::MAX as usize {
        return Err(Error::invalid("image too large"));
    }
    Ok(())
}

fn factorized_tables(prior: &FactorizedPrior, windows: &[(i32, i32)]) -> Result<Vec<(Vec<f64>, Cdf)>> {
    windows
        .iter()
        .enumerate()
        .map(|(c, &win)| {
            let pmf = entropy::factorized_pmf(prior, c, win)?;
            let cdf = build_cdf(&pmf, PRECISION)?;
            Ok((pmf, cdf))
        })
        .collect()
}

fn gaussian_table(sigma: f64, window: (i32, i32)) -> Result<(Vec<f64>, Cdf)> {
    let pmf = entropy::gaussian_pmf(sigma, window)?;
    let cdf = build_cdf(&pmf, PRECISION)?;
    Ok((pmf, cdf))
}

fn check_windows(windows: &[(i32, i32)], expected: usize, what: &str) -> Result<()> {
    if windows.len() != expected {
        return Err(Error::ArchMismatch(format!("bitstream has {} {what} windows, model expects {expected}", windows.len())));
    }
    for &(lo, hi) in windows {
        if hi < lo || (hi - lo + 1) as usize > entropy::MAX_ALPHABET {
            return Err(Error::Corrupt { offset: 0, reason: format!("{what} window [{lo}, {hi}] is invalid") });
        }
    }
    Ok(())
}

/// Positions `(channel within group, y, x)` of a slice in coding order.
fn slice_positions(mask: &Tensor) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let s = mask.shape();
    (0..s.c).flat_map(move |c| {
        (0..s.h).flat_map(move |y| (0..s.w).filter(move |&x| mask.at(0, c, y, x) == 1.0).map(move |x| (c, y, x)))
    })
}

fn reconstruct(tape: &mut Tape, model: &CodecModel, bound: &BoundParams, plan: &StagePlan, y_hat: crate::autograd::Var, h: usize, w: usize) -> Result<Tensor> {
    let x = hft::synthesis(tape, y_hat, bound, &model.config, plan)?;
    Ok(tape.value(x).crop(h, w)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Encodes a `(1, 3, h, w)` image with values in `[0, 1]`.
pub fn encode(model: &CodecModel, x: &Tensor, lambda_index: u8) -> Result<Encoded> {
    checked_image(x)?;
    let (h, w) = (x.shape().h, x.shape().w);
    let prep = prepare(model, h, w)?;
    let padded = x.pad_replicate(prep.plan.input.1, prep.plan.input.2)?;

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, false);
    let xv = tape.constant(padded);
    let y = hft::analysis(&mut tape, xv, &bound, &model.config, &prep.plan)?;
    let z = hft::hyper_transform(&mut tape, y, &bound, &model.config, &prep.plan, HyperDirection::Analysis)?;
    let z_hat = quantize_hard(tape.value(z), None)?;

    // hyper-latent
    let z_windows = entropy::channel_windows(&z_hat)?;
    let z_tables = factorized_tables(&prep.prior, &z_windows)?;
    let zs = z_hat.shape();
    let mut estimated_bits = 0.0;
    let mut model_bits = entropy::factorized_rate(&z_hat, &prep.prior)?;
    let mut enc = RangeEncoder::new();
    for c in 0..zs.c {
        let (pmf, cdf) = &z_tables[c];
        for &v in &z_hat.data()[c * zs.plane()..][..zs.plane()] {
            let sym = (v as i32 - z_windows[c].0) as usize;
            estimated_bits -= pmf[sym].log2();
            enc.encode(sym, cdf)?;
        }
    }
    let z_payload = enc.finish();

    // latent
    let zv = tape.constant(z_hat);
    let features = hft::hyper_transform(&mut tape, zv, &bound, &model.config, &prep.plan, HyperDirection::Synthesis)?;
    let (m, lh, lw) = prep.plan.latent();
    let mut residuals = Tensor::zeros(Shape::new(1, m, lh, lw));
    // (channel, residual, sigma) in coding order
    let mut coded: Vec<(usize, i32, f64)> = Vec::with_capacity(m * lh * lw);
    let walk = entropy::walk_latent(&mut tape, &bound, &prep.schedule, features, |tape, step| {
        let start = step.slice.channel_start;
        let yg = tape.value(y).channels(start, step.slice.channels)?;
        let mu = tape.value(step.mu).clone();
        let sigma = tape.value(step.sigma);
        let sym = quantize_symbols(&yg, Some(&mu))?;
        for (c, py, px) in slice_positions(step.mask) {
            let r = sym.at(0, c, py, px);
            let s = sigma.at(0, c, py, px);
            residuals.set(0, start + c, py, px, r);
            coded.push((start + c, r as i32, s));
            model_bits += entropy::gaussian_bits(r, 0.0, s);
        }
        Ok(tape.constant(sym.zip_map(&mu, "dequantize", dequantize)?))
    })?;
    let y_windows = entropy::channel_windows(&residuals)?;
    let mut enc = RangeEncoder::new();
    for &(c, r, sigma) in &coded {
        let sym = (r - y_windows[c].0) as usize;
        let (pmf, cdf) = gaussian_table(sigma, y_windows[c])?;
        estimated_bits -= pmf[sym].log2();
        enc.encode(sym, &cdf)?;
    }
    let y_payload = enc.finish();

    let x_hat = reconstruct(&mut tape, model, &bound, &prep.plan, walk.y_hat, h, w)?;
    let bitstream = Bitstream {
        width: w as u32,
        height: h as u32,
        model_id: model.config.model_id(),
        lambda_index,
        z_windows,
        y_windows,
        z_payload,
        y_payload,
    };
    let stats = EncodeStats {
        width: w,
        height: h,
        z_payload_bits: bitstream.z_payload.len() * 8,
        y_payload_bits: bitstream.y_payload.len() * 8,
        file_bits: bitstream.total_bits()?,
        estimated_bits,
        model_bits,
    };
    Ok(Encoded { bitstream, x_hat, stats })
}

fn dequantize(symbol: f64, mu: f64) -> f64 {
    symbol + mu
}

/// Decodes a bitstream produced by [`encode`] with the same model.
pub fn decode(model: &CodecModel, bitstream: &Bitstream) -> Result<Tensor> {
    if bitstream.model_id != model.config.model_id() {
        return Err(Error::ArchMismatch(format!(
            "bitstream was coded with model id {:#06x} but the checkpoint has {:#06x}",
            bitstream.model_id,
            model.config.model_id()
        )));
    }
    let (h, w) = (bitstream.height as usize, bitstream.width as usize);
    let prep = prepare(model, h, w)?;
    let (mz, zh, zw) = prep.plan.hyper_latent();
    let (m, _, _) = prep.plan.latent();
    check_windows(&bitstream.z_windows, mz, "hyper-latent")?;
    check_windows(&bitstream.y_windows, m, "latent")?;

    let z_tables = factorized_tables(&prep.prior, &bitstream.z_windows)?;
    let mut dec = RangeDecoder::new(&bitstream.z_payload)?;
    let mut z_hat = Tensor::zeros(Shape::new(1, mz, zh, zw));
    for c in 0..mz {
        let (_, cdf) = &z_tables[c];
        let lo = bitstream.z_windows[c].0;
        for v in &mut z_hat.data_mut()[c * zh * zw..][..zh * zw] {
            *v = (dec.decode(cdf)? as i32 + lo) as f64;
        }
    }
    dec.finish()?;

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, false);
    let zv = tape.constant(z_hat);
    let features = hft::hyper_transform(&mut tape, zv, &bound, &model.config, &prep.plan, HyperDirection::Synthesis)?;
    let mut dec = RangeDecoder::new(&bitstream.y_payload)?;
    let walk = entropy::walk_latent(&mut tape, &bound, &prep.schedule, features, |tape, step| {
        let start = step.slice.channel_start;
        let mu = tape.value(step.mu).clone();
        let sigma = tape.value(step.sigma);
        let mut sym = Tensor::zeros(mu.shape());
        for (c, py, px) in slice_positions(step.mask) {
            let window = bitstream.y_windows[start + c];
            let (_, cdf) = gaussian_table(sigma.at(0, c, py, px), window)?;
            let r = dec.decode(&cdf)? as i32 + window.0;
            sym.set(0, c, py, px, r as f64);
        }
        Ok(tape.constant(sym.zip_map(&mu, "dequantize", dequantize)?))
    })?;
    dec.finish()?;
    reconstruct(&mut tape, model, &bound, &prep.plan, walk.y_hat, h, w)
}

/// Encodes an image file to a bitstream file.
pub fn encode_file(checkpoint: &Path, input: &Path, output: &Path) -> Result<EncodeStats> {
    let ck = Checkpoint::load(checkpoint)?;
    let x = image_io::load_image(input)?;
    let enc = encode(&ck.model, &x, ck.lambda_index)?;
    std::fs::write(output, enc.bitstream.to_bytes()?)?;
    Ok(enc.stats)
}

/// Decodes a bitstream file to an image file.
pub fn decode_file(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let bytes = std::fs::read(input)?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let img = decode(&ck.model, &bs)?;
    image_io::save_image(output, &img)
}

/// One row of a benchmark: averages over an image set for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub point: RdPoint,
    pub images: usize,
}

impl BenchRow {
    pub fn to_csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.label, self.point.bpp, self.point.psnr_db, self.point.ms_ssim)
    }
}

/// Image files (`.ppm`, `.png`) of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no .ppm or .png images found", dir.display())));
    }
    Ok(out)
}

/// Encodes and decodes one image, returning `(bpp, psnr, ms_ssim)` of the
/// 8-bit reconstruction.
pub fn evaluate_image(model: &CodecModel, x: &Tensor) -> Result<RdPoint> {
    let enc = encode(model, x, 0)?;
    let x_hat = decode(model, &enc.bitstream)?;
    let x_hat = metrics::to_8bit(&x_hat).map(|v| v / 255.0);
    Ok(RdPoint { bpp: enc.stats.bpp(), psnr_db: metrics::psnr_8bit(x, &x_hat)?, ms_ssim: metrics::ms_ssim(x, &x_hat)? })
}

/// Mean rate and quality of each checkpoint over every image of `dir`.
///
/// Images are processed in parallel; results are reduced in name order so
/// the output does not depend on scheduling.
pub fn run_bench(checkpoints: &[PathBuf], dir: &Path) -> Result<Vec<BenchRow>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("bench needs at least one checkpoint"));
    }
    let images = list_images(dir)?;
    let loaded: Vec<Tensor> = images.iter().map(|p| image_io::load_image(p)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        let points: Vec<RdPoint> = loaded.par_iter().map(|x| evaluate_image(&ck.model, x)).collect::<Result<_>>()?;
        let n = points.len() as f64;
        let mean = |f: fn(&RdPoint) -> f64| points.iter().map(f).sum::<f64>() / n;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(BenchRow {
            label,
            point: RdPoint { bpp: mean(|p| p.bpp), psnr_db: mean(|p| p.psnr_db), ms_ssim: mean(|p| p.ms_ssim) },
            images: points.len(),
        });
    }
    Ok(rows)
}

/// Benchmark rows as CSV with a header line.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{RD_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hft::HftConfig;

    fn image(h: usize, w: usize, k: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| (((c + k) * 37 + y * 11 + x * 5 + k * x * y) % 97) as f64 / 96.0)
    }

    #[test]
    fn roundtrip_is_exact_and_near_estimate() {
        let model = CodecModel::init(HftConfig::toy(), 1).unwrap();
        for (k, (h, w)) in [(32, 32), (20, 45), (1, 1)].into_iter().enumerate() {
            let x = image(h, w, k);
            let enc = encode(&model, &x, 4).unwrap();
            let bytes = enc.bitstream.to_bytes().unwrap();
            let bs = Bitstream::from_bytes(&bytes).unwrap();
            assert_eq!((bs.width, bs.height), (w as u32, h as u32));
            let back = decode(&model, &bs).unwrap();
            assert_eq!(back, enc.x_hat);
            let s = enc.stats;
            let gap = s.payload_bits() as f64 - s.estimated_bits;
            assert!(gap.abs() <= 0.01 * s.estimated_bits + 64.0, "gap {gap} for estimate {}", s.estimated_bits);
        }
    }

    #[test]
    fn wrong_model_id_is_rejected() {
        let model = CodecModel::init(HftConfig::toy(), 1).unwrap();
        let enc = encode(&model, &image(16, 16, 0), 0).unwrap();
        let other = CodecModel::init(HftConfig::tiny(), 1).unwrap();
        assert!(matches!(decode(&other, &enc.bitstream), Err(Error::ArchMismatch(_))));
    }

    #[test]
    fn truncated_payload_errors() {
        let model = CodecModel::init(HftConfig::toy(), 1).unwrap();
        let mut bs = encode(&model, &image(32, 32, 3), 0).unwrap().bitstream;
        bs.y_payload.truncate(bs.y_payload.len().saturating_sub(3));
        assert!(decode(&model, &bs).is_err());
    }
}
