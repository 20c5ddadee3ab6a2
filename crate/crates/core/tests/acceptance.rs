//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! and then asserts.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use hft_codec::autograd::Tape;
use hft_codec::codec::{decode, encode};
use hft_codec::complexity::{model_report, run_analyze, ArchSpec};
use hft_codec::entropy::{self, ContextSchedule};
use hft_codec::hft::{BoundParams, HftConfig};
use hft_codec::metrics::{bd_metrics, ms_ssim, psnr, psnr_8bit, RdCurve, RdPoint};
use hft_codec::model::CodecModel;
use hft_codec::quant::QuantMode;
use hft_codec::range_coder::{build_cdf, decode_symbols, encode_symbols, Cdf, PRECISION};
use hft_codec::trainer::{loss_and_grads, rd_loss_on_tape, train, TrainConfig};
use hft_codec::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, ok: bool, elapsed: Duration, detail: String) {
    println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
}

fn spec_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(format!("{name}.json"))
}

/// Smooth synthetic photo stand-in: a tilted colour gradient with a few
/// soft blobs, quantized to 8 bits.
fn blob_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    let tilt: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.01..0.05), std::array::from_fn(|_| rng.gen_range(-0.3..0.3))))
        .collect();
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut v = base[c] + tilt[c].0 * fy + tilt[c].1 * fx;
        for (by, bx, s, amp) in &blobs {
            v += amp[c] * (-((fy - by).powi(2) + (fx - bx).powi(2)) / s).exp();
        }
        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

#[test]
fn complexity_claim() {
    let t = Instant::now();
    let paths = [spec_path("loc-lic-ref"), spec_path("cheng2020-style"), spec_path("mlic-style")];
    let a = run_analyze(&paths, 256, 256).unwrap();
    let (ours, cheng, mlic) = (a.rows[0].kmac_per_pixel, a.rows[1].kmac_per_pixel, a.rows[2].kmac_per_pixel);
    let ratio = ours / mlic;
    let elapsed = t.elapsed();
    let ok = (220.0..=320.0).contains(&ours)
        && (cheng - 933.0).abs() <= 0.15 * 933.0
        && ratio <= 0.30
        && elapsed < Duration::from_secs(1);
    report(
        "complexity claim",
        ok,
        elapsed,
        format!("loc-lic-ref {ours:.1}, cheng2020-style {cheng:.1}, mlic-style {mlic:.1} kMAC/px, ratio {ratio:.4}"),
    );
    assert!(ok);
}

#[test]
fn scale_invariance() {
    let t = Instant::now();
    let spec = ArchSpec::load(&spec_path("loc-lic-ref")).unwrap();
    let a = model_report(&spec, (3, 256, 256)).unwrap().kmac_per_pixel();
    let b = model_report(&spec, (3, 512, 512)).unwrap().kmac_per_pixel();
    let rel = (a - b).abs() / a;
    let elapsed = t.elapsed();
    let ok = rel <= 1e-3 && elapsed < Duration::from_secs(1);
    report("scale invariance", ok, elapsed, format!("{a:.4} vs {b:.4} kMAC/px, relative difference {rel:.2e}"));
    assert!(ok);
}

/// RD loss of `model` on `x` in noise mode with a fixed draw.
fn loss_value(model: &CodecModel, x: &Tensor, lambda: f64, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &bound, xv, QuantMode::Noise, seed).unwrap();
    let s = x.shape();
    let (loss, _) = rd_loss_on_tape(&mut tape, xv, out.x_hat, out.bits_y, out.bits_z, lambda, (s.h, s.w)).unwrap();
    tape.value(loss).item()
}

#[test]
fn gradient_integrity() {
    let t = Instant::now();
    let cfg = HftConfig::tiny();
    assert_eq!((cfg.base_channels, cfg.stages, cfg.latent_channels), (4, 3, 8));
    let model = CodecModel::init(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = blob_image(&mut rng, 16, 16);
    // keeps distortion and rate of the untrained model at comparable size,
    // so the loss is O(1) and its f64 resolution does not swamp the differences
    let (lambda, seed) = (1e-5, 5);
    let (_, grads) = loss_and_grads(&model, &x, lambda, QuantMode::Noise, seed).unwrap();
    let names: Vec<&String> = model.params.iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let samples = 300;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for i in 0..samples {
        // two samples from every tensor first, then uniform picks
        let name = if i < 2 * names.len() { names[i / 2] } else { names[rng.gen_range(0..names.len())] };
        let len = model.params.get(name).unwrap().len();
        let k = rng.gen_range(0..len);
        let mut plus = model.clone();
        plus.params.get_mut(name).unwrap().data_mut()[k] += h;
        let mut minus = model.clone();
        minus.params.get_mut(name).unwrap().data_mut()[k] -= h;
        let fd = (loss_value(&plus, &x, lambda, seed) - loss_value(&minus, &x, lambda, seed)) / (2.0 * h);
        let g = grads[name].data()[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{k}] analytic {g:.6e} numeric {fd:.6e}");
        }
    }
    let elapsed = t.elapsed();
    let ok = worst < 1e-3 && elapsed < Duration::from_secs(120);
    report("gradient integrity", ok, elapsed, format!("{samples} parameters, worst relative error {worst:.2e} at {worst_at}"));
    assert!(ok);
}

fn random_pmf(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = match rng.gen_range(0..10) {
        0 => 1,
        1 => 2,
        2..=7 => rng.gen_range(2..40),
        _ => rng.gen_range(40..600),
    };
    let raw: Vec<f64> = match rng.gen_range(0..3) {
        // peaked
        0 => {
            let centre = rng.gen_range(0..n) as f64;
            let sigma = rng.gen_range(0.05..8.0);
            (0..n).map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
        }
        // rough
        1 => (0..n).map(|_| rng.gen::<f64>().powi(4)).collect(),
        _ => (0..n).map(|_| rng.gen::<f64>()).collect(),
    };
    entropy::finalize_pmf(&raw).unwrap()
}

fn draw(pmf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

#[test]
fn coder_correctness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 100_000;
    let mut failures = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut total_symbols = 0usize;
    for case in 0..cases {
        let tables: Vec<(Vec<f64>, Cdf)> = (0..rng.gen_range(1..4))
            .map(|_| {
                // every fourth case uses discretized Gaussian tables
                let pmf = if case % 4 == 0 {
                    entropy::gaussian_pmf(rng.gen_range(0.11..20.0), entropy::DEFAULT_WINDOW).unwrap()
                } else {
                    random_pmf(&mut rng)
                };
                let cdf = build_cdf(&pmf, PRECISION).unwrap();
                (pmf, cdf)
            })
            .collect();
        let len = if rng.gen_range(0..20) == 0 { 0 } else { rng.gen_range(1..200) };
        let mut symbols = Vec::with_capacity(len);
        let mut cdfs = Vec::with_capacity(len);
        let mut info = 0.0;
        for _ in 0..len {
            let (pmf, cdf) = &tables[rng.gen_range(0..tables.len())];
            let s = draw(pmf, &mut rng);
            info -= pmf[s].log2();
            symbols.push(s);
            cdfs.push(cdf);
        }
        total_symbols += len;
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        let back = decode_symbols(&bytes, &cdfs);
        let bits = bytes.len() as f64 * 8.0;
        let excess = bits - (1.01 * info + 32.0);
        worst_excess = worst_excess.max(excess);
        if back.ok().as_deref() != Some(&symbols[..]) || excess > 0.0 {
            failures += 1;
        }
    }
    let elapsed = t.elapsed();
    let ok = failures == 0 && elapsed < Duration::from_secs(60);
    report(
        "coder correctness",
        ok,
        elapsed,
        format!("{cases} cases, {total_symbols} symbols, {failures} failures, worst length excess over bound {worst_excess:.2} bits"),
    );
    assert!(ok);
}

#[test]
fn codec_closed_loop() {
    let t = Instant::now();
    let model = CodecModel::init(HftConfig::toy(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatched = 0;
    let mut over = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    let (mut payload, mut estimate) = (0usize, 0.0);
    for i in 0..50 {
        let (h, w) = (rng.gen_range(8..=48), rng.gen_range(8..=48));
        let mut x = blob_image(&mut rng, h, w);
        if i % 3 == 0 {
            // add texture so some images cost more bits
            for v in x.data_mut() {
                *v = ((*v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        let enc = encode(&model, &x, 0).unwrap();
        let back = decode(&model, &enc.bitstream).unwrap();
        if back != enc.x_hat {
            mismatched += 1;
        }
        let s = enc.stats;
        let gap = (s.payload_bits() as f64 - s.estimated_bits).abs() - (0.01 * s.estimated_bits + 64.0);
        worst_gap = worst_gap.max(gap);
        if gap > 0.0 {
            over += 1;
        }
        payload += s.payload_bits();
        estimate += s.estimated_bits;
    }
    let elapsed = t.elapsed();
    let ok = mismatched == 0 && over == 0 && elapsed < Duration::from_secs(300);
    report(
        "codec closed loop",
        ok,
        elapsed,
        format!(
            "50 images, {mismatched} reconstruction mismatches, {over} outside tolerance, coded {payload} vs estimated {estimate:.0} bits, worst margin {worst_gap:.1} bits"
        ),
    );
    assert!(ok);
}

fn overfit_image() -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
        let (fy, fx) = (y as f64 / 31.0, x as f64 / 31.0);
        let r2 = (fy - 0.5).powi(2) + (fx - 0.4).powi(2);
        let v = (0.15 + 0.4 * fx * (1.0 + c as f64) / 3.0 + 0.3 * fy + 0.35 * (-r2 / 0.03).exp()).min(1.0);
        (v * 255.0).round() / 255.0
    })
}

#[test]
fn desk_scale_training() {
    let t = Instant::now();
    let img = overfit_image();
    let config = HftConfig::toy();
    let cfg = TrainConfig { lambda: 0.0483, steps: 2000, batch: 1, crop: 32, lr: 1e-3, seed: 0, quant: QuantMode::Hybrid };
    let mut model = CodecModel::init(config.clone(), 0).unwrap();
    let history = train(&mut model, std::slice::from_ref(&img), &cfg, None).unwrap();
    let enc = encode(&model, &img, 5).unwrap();
    let out = decode(&model, &enc.bitstream).unwrap();
    let p = psnr_8bit(&img, &out).unwrap();
    let bpp = enc.stats.bpp();
    let first = history[0].total;
    let tail = history[history.len() - 50..].iter().map(|h| h.total).sum::<f64>() / 50.0;
    let drop = 1.0 - tail / first;

    let mut again = CodecModel::init(config, 0).unwrap();
    let replay = train(&mut again, std::slice::from_ref(&img), &TrainConfig { steps: 50, ..cfg }, None).unwrap();
    let identical = replay[..] == history[..50];
    let elapsed = t.elapsed();
    let ok = p >= 35.0 && bpp <= 8.0 && drop >= 0.5 && identical && elapsed < Duration::from_secs(900);
    report(
        "desk-scale training",
        ok,
        elapsed,
        format!(
            "coded psnr {p:.2} dB at {bpp:.3} bpp after 2000 steps, loss {first:.2} -> {tail:.4} ({:.1}% lower), replay identical: {identical}",
            100.0 * drop
        ),
    );
    assert!(ok);
}

#[test]
fn lambda_ordering() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images: Vec<Tensor> = (0..16).map(|_| blob_image(&mut rng, 48, 48)).collect();
    let eval: Vec<Tensor> = images.iter().map(|x| x.crop(32, 32).unwrap()).collect();
    let lambdas = [0.0018, 0.0067, 0.0483];
    let mut results = Vec::new();
    for &lambda in &lambdas {
        let mut model = CodecModel::init(HftConfig::toy(), 1).unwrap();
        let cfg = TrainConfig { lambda, steps: 4000, batch: 2, crop: 32, lr: 1e-3, seed: 1, quant: QuantMode::Hybrid };
        train(&mut model, &images, &cfg, None).unwrap();
        let (mut bpp, mut mse) = (0.0, 0.0);
        for x in &eval {
            let enc = encode(&model, x, 0).unwrap();
            bpp += enc.stats.bpp();
            mse += hft_codec::metrics::mse(x, &enc.x_hat).unwrap();
        }
        results.push((lambda, bpp / eval.len() as f64, mse / eval.len() as f64));
    }
    let bpp_ordered = results.windows(2).all(|w| w[0].1 < w[1].1);
    let mse_ordered = results.windows(2).all(|w| w[0].2 > w[1].2);
    let elapsed = t.elapsed();
    let ok = bpp_ordered && mse_ordered && elapsed < Duration::from_secs(45 * 60);
    let detail = results
        .iter()
        .map(|(l, b, m)| format!("λ={l}: {b:.4} bpp, {:.2} dB", hft_codec::metrics::psnr_from_mse(*m, 1.0)))
        .collect::<Vec<_>>()
        .join("; ");
    report("lambda ordering", ok, elapsed, detail);
    assert!(ok);
}

#[test]
fn metrics_checks() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = blob_image(&mut rng, 64, 64);
    let same = ms_ssim(&a, &a).unwrap();
    let b = a.map(|v| v + 0.01);
    let c = a.map(|v| v + 0.02);
    let drop = psnr(&a, &b, 1.0).unwrap() - psnr(&a, &c, 1.0).unwrap();
    let curve = |shift: f64| {
        RdCurve::new(
            "c",
            [(0.1, 28.0), (0.25, 31.0), (0.5, 34.0), (1.0, 37.0)]
                .iter()
                .map(|&(bpp, q)| RdPoint { bpp, psnr_db: q + shift, ms_ssim: 0.9 })
                .collect(),
        )
        .unwrap()
    };
    let (rate0, psnr0) = bd_metrics(&curve(0.0), &curve(0.0)).unwrap();
    let (_, psnr1) = bd_metrics(&curve(0.0), &curve(1.0)).unwrap();
    let elapsed = t.elapsed();
    let ok = same == 1.0
        && (drop - 6.0206).abs() < 1e-4
        && rate0.abs() < 1e-9
        && psnr0.abs() < 1e-9
        && (psnr1 - 1.0).abs() <= 1e-6
        && elapsed < Duration::from_secs(10);
    report(
        "metrics",
        ok,
        elapsed,
        format!("ms_ssim(a,a) {same}, psnr drop {drop:.4} dB, identity ({rate0:.2e}, {psnr0:.2e}), shifted bd_psnr {psnr1:.8}"),
    );
    assert!(ok);
}

/// Per-slice `(mu, sigma)` when every slice is filled from `y_hat`.
fn slice_params(model: &CodecModel, schedule: &ContextSchedule, features: &Tensor, y_hat: &Tensor) -> Vec<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, false);
    let f = tape.constant(features.clone());
    let mut out = Vec::new();
    entropy::walk_latent(&mut tape, &bound, schedule, f, |tape, step| {
        out.push((tape.value(step.mu).clone(), tape.value(step.sigma).clone()));
        let g = y_hat.channels(step.slice.channel_start, step.slice.channels)?;
        Ok(tape.constant(g))
    })
    .unwrap();
    out
}

fn masked_equal(a: &Tensor, b: &Tensor, mask: &Tensor) -> bool {
    a.data().iter().zip(b.data()).zip(mask.data()).all(|((x, y), m)| *m == 0.0 || x == y)
}

#[test]
fn context_causality() {
    let t = Instant::now();
    let mut violations = 0;
    let mut live = 0;
    let draws = 20;
    for draw in 0..draws {
        let model = CodecModel::init(HftConfig::toy(), 100 + draw).unwrap();
        let schedule = model.schedule().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let (h, w) = (5, 6);
        let m = schedule.latent_channels();
        let features = Tensor::from_fn(Shape::new(1, 2 * m, h, w), |_, _, _, _| rng.gen_range(-2.0..2.0));
        let y = Tensor::from_fn(Shape::new(1, m, h, w), |_, _, _, _| rng.gen_range(-4i32..=4) as f64);
        let base = slice_params(&model, &schedule, &features, &y);
        let n = schedule.slices().len();
        for i in 0..n {
            // perturb every element of slice i and later
            let perturbed = Tensor::from_fn(y.shape(), |_, c, py, px| {
                let v = y.at(0, c, py, px);
                if schedule.slice_of(c, py, px) >= i { v + rng.gen_range(1..5) as f64 } else { v }
            });
            let probe = slice_params(&model, &schedule, &features, &perturbed);
            for j in 0..=i {
                let mask = schedule.mask(j, 1, h, w);
                if !masked_equal(&base[j].0, &probe[j].0, &mask) || !masked_equal(&base[j].1, &probe[j].1, &mask) {
                    violations += 1;
                }
            }
            // the context is live: some later slice reacts
            if i + 1 < n && (i + 1..n).any(|j| base[j].0 != probe[j].0) {
                live += 1;
            }
        }
        // anchors feed the non-anchors of the same group
        let anchor_only = Tensor::from_fn(y.shape(), |_, c, py, px| {
            let v = y.at(0, c, py, px);
            if schedule.slice_of(c, py, px) == 0 { v + 3.0 } else { v }
        });
        let probe = slice_params(&model, &schedule, &features, &anchor_only);
        if probe[1].0 == base[1].0 {
            violations += 1;
        }
    }
    let elapsed = t.elapsed();
    let ok = violations == 0 && live > 0 && elapsed < Duration::from_secs(60);
    report("context causality", ok, elapsed, format!("{draws} weight draws, {violations} violations, {live} live-context probes"));
    assert!(ok);
}
