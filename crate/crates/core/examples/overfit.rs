//! Overfits the toy model to one synthetic 32x32 image, then codes it with
//! the real range coder.
//!
//! ```text
//! cargo run --release -p hft-codec --example overfit -- [steps] [lambda] [lr]
//! ```

use hft_codec::codec::{decode, encode};
use hft_codec::hft::HftConfig;
use hft_codec::metrics::{psnr_8bit, psnr_from_mse};
use hft_codec::model::CodecModel;
use hft_codec::quant::QuantMode;
use hft_codec::trainer::{train, TrainConfig};
use hft_codec::{Shape, Tensor};

fn main() -> hft_codec::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let steps = arg(1, 2000.0) as usize;
    let lambda = arg(2, 0.0483);
    let lr = arg(3, 1e-3);

    // a smooth gradient with a soft blob
    let img = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
        let (fy, fx) = (y as f64 / 31.0, x as f64 / 31.0);
        let r2 = (fy - 0.5).powi(2) + (fx - 0.4).powi(2);
        (0.15 + 0.4 * fx * (1.0 + c as f64) / 3.0 + 0.3 * fy + 0.35 * (-r2 / 0.03).exp()).min(1.0)
    });
    let config = HftConfig { res_blocks_per_stage: 1, ..HftConfig::toy() };
    let mut model = CodecModel::init(config, 0)?;
    let cfg = TrainConfig { lambda, steps, batch: 1, crop: 32, lr, seed: 0, quant: QuantMode::Hybrid };
    let start = std::time::Instant::now();
    let history = train(&mut model, std::slice::from_ref(&img), &cfg, None)?;
    for (i, h) in history.iter().enumerate() {
        if i % (steps / 10).max(1) == 0 || i + 1 == steps {
            println!("step {i:5}  loss {:9.4}  psnr {:6.2}  bpp {:6.3}", h.total, psnr_from_mse(h.mse, 1.0), h.bpp());
        }
    }
    let enc = encode(&model, &img, 5)?;
    let out = decode(&model, &enc.bitstream)?;
    assert_eq!(out, enc.x_hat);
    println!(
        "coded: {} payload bits ({:.3} bpp, estimate {:.1} bits), psnr {:.2} dB, {:.1}s",
        enc.stats.payload_bits(),
        enc.stats.bpp(),
        enc.stats.estimated_bits,
        psnr_8bit(&img, &out)?,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
