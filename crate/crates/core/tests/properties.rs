//! Property tests over the coding primitives, plus a few structural
//! invariants of the model and the analyzer.

use hft_codec::bitstream::Bitstream;
use hft_codec::complexity::{from_hft, layer_macs, ArchSpec, Layer, LayerKind};
use hft_codec::entropy::{self, gaussian_bits, gaussian_pmf, PMF_FLOOR};
use hft_codec::hft::HftConfig;
use hft_codec::metrics::{bd_metrics, psnr, RdCurve, RdPoint};
use hft_codec::model::CodecModel;
use hft_codec::quant::{quantize_hard, QuantMode};
use hft_codec::range_coder::{build_cdf, decode_symbols, encode_symbols, PRECISION};
use hft_codec::trainer::{train_step, Adam, TrainConfig};
use hft_codec::{Shape, Tensor};
use proptest::prelude::*;

fn pmf_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..64).prop_map(|raw| entropy::finalize_pmf(&raw).unwrap())
}

proptest! {
    #[test]
    fn hard_quantization_is_idempotent(v in prop::collection::vec(-1e4f64..1e4, 1..64), mu in -50.0f64..50.0) {
        let y = Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap();
        let mean = Tensor::full(y.shape(), mu);
        let q = quantize_hard(&y, Some(&mean)).unwrap();
        prop_assert_eq!(quantize_hard(&q, Some(&mean)).unwrap(), q.clone());
        for (a, b) in y.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn finalized_pmfs_are_valid(raw in prop::collection::vec(-1.0f64..10.0, 1..500)) {
        let p = entropy::finalize_pmf(&raw).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&q| q >= PMF_FLOOR * (1.0 - 1e-12)));
    }

    #[test]
    fn quantized_tables_are_valid(pmf in pmf_strategy()) {
        let cdf = build_cdf(&pmf, PRECISION).unwrap();
        let cum = cdf.cumulative();
        prop_assert_eq!(cum[0], 0);
        prop_assert_eq!(*cum.last().unwrap(), 1 << PRECISION);
        prop_assert!(cum.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn coder_roundtrip(tables in prop::collection::vec(pmf_strategy(), 1..4), picks in prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 0..300)) {
        let cdfs: Vec<_> = tables.iter().map(|p| build_cdf(p, PRECISION).unwrap()).collect();
        let mut symbols = Vec::new();
        let mut used = Vec::new();
        let mut info = 0.0;
        for (t, s) in &picks {
            let t = t.index(tables.len());
            let s = s.index(tables[t].len());
            info -= tables[t][s].log2();
            symbols.push(s);
            used.push(&cdfs[t]);
        }
        let bytes = encode_symbols(&symbols, &used).unwrap();
        prop_assert_eq!(decode_symbols(&bytes, &used).unwrap(), symbols);
        // arbitrary (not sampled) symbols: only the quantization and flush overheads apply
        prop_assert!((bytes.len() * 8) as f64 <= 1.01 * info + 32.0 + 0.01 * picks.len() as f64);
    }

    #[test]
    fn gaussian_rate_grows_with_distance(sigma in 0.11f64..30.0, mu in -20.0f64..20.0, a in 0.0f64..40.0, b in 0.0f64..40.0) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(gaussian_bits(mu + near, mu, sigma) <= gaussian_bits(mu + far, mu, sigma) + 1e-12);
        prop_assert!((gaussian_bits(mu + a, mu, sigma) - gaussian_bits(mu - a, mu, sigma)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_tables_are_valid(sigma in 0.11f64..100.0, lo in -200i32..0, span in 1i32..300) {
        let p = gaussian_pmf(sigma, (lo, lo + span)).unwrap();
        prop_assert_eq!(p.len(), span as usize + 1);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bitstream_roundtrip(
        w in 1u32..5000, h in 1u32..5000, id in any::<u16>(), li in any::<u8>(),
        zw in prop::collection::vec((-300i32..0, 0i32..300), 1..8),
        yw in prop::collection::vec((-300i32..0, 0i32..300), 1..8),
        zp in prop::collection::vec(any::<u8>(), 4..40),
        yp in prop::collection::vec(any::<u8>(), 4..40),
    ) {
        let b = Bitstream { width: w, height: h, model_id: id, lambda_index: li, z_windows: zw, y_windows: yw, z_payload: zp, y_payload: yp };
        let bytes = b.to_bytes().unwrap();
        prop_assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Bitstream::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..20, w in 1usize..20, ph in 0usize..9, pw in 0usize..9) {
        let t = Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| (c * 1000 + y * 31 + x) as f64);
        let p = t.pad_replicate(h + ph, w + pw).unwrap();
        prop_assert_eq!(p.crop(h, w).unwrap(), t);
    }

    #[test]
    fn conv_macs_match_loop_count(c_in in 1usize..6, c_out in 1usize..6, k in 1usize..4, stride in 1usize..3, h in 4usize..12, w in 4usize..12) {
        let k = 2 * k - 1;
        let layer = Layer::new("l", LayerKind::Conv, c_in, c_out, k, stride);
        let (macs, (c, oh, ow)) = layer_macs(&layer, (c_in, h, w)).unwrap();
        // one multiply-accumulate per output element, input channel and tap
        let (mut count, mut out_h, mut out_w) = (0u128, 0, 0);
        for _y in (0..h).step_by(stride) {
            out_h += 1;
            out_w = 0;
            for _x in (0..w).step_by(stride) {
                out_w += 1;
                count += (c_out * c_in * k * k) as u128;
            }
        }
        prop_assert_eq!((c, oh, ow), (c_out, out_h, out_w));
        prop_assert_eq!(macs, count);
    }

    #[test]
    fn psnr_drops_with_error(a in 0.001f64..0.2) {
        let x = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, y, x| ((c + y + x) % 5) as f64 / 5.0);
        let d1 = x.map(|v| v + a);
        let d2 = x.map(|v| v + 2.0 * a);
        let drop = psnr(&x, &d1, 1.0).unwrap() - psnr(&x, &d2, 1.0).unwrap();
        prop_assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn bd_psnr_recovers_a_constant_shift(shift in -3.0f64..3.0, base in 20.0f64..35.0) {
        let curve = |s: f64| RdCurve::new("c", [0.1, 0.3, 0.6, 1.2, 2.0].iter().enumerate()
            .map(|(i, &bpp)| RdPoint { bpp, psnr_db: base + 3.0 * i as f64 + s, ms_ssim: 0.9 }).collect()).unwrap();
        let (_, d) = bd_metrics(&curve(0.0), &curve(shift)).unwrap();
        prop_assert!((d - shift).abs() < 1e-6);
    }
}

#[test]
fn shipped_reference_spec_matches_the_model() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/loc-lic-ref.json");
    let shipped = ArchSpec::load(&path).unwrap();
    assert_eq!(shipped, from_hft("loc-lic-ref", &HftConfig::reference()).unwrap());
}

#[test]
fn one_step_moves_every_parameter() {
    let mut model = CodecModel::init(HftConfig::toy(), 3).unwrap();
    let before = model.params.clone();
    // Noise keeps the latents away from exact zeros (rounded latents of an
    // untrained model are mostly zero, which zeroes the weight gradients of
    // the layers they feed); 64x64 gives the hyper-latent a 2x2 extent so
    // every kernel tap sees data.
    let x = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| ((c * 7 + y * 3 + x * 5) % 23) as f64 / 23.0);
    let cfg = TrainConfig { lambda: 0.0067, steps: 1, batch: 1, crop: 64, lr: 1e-4, seed: 0, quant: QuantMode::Noise };
    let mut adam = Adam::new(cfg.lr);
    train_step(&mut model, &mut adam, &x, &cfg, 0).unwrap();
    let (mut moved, mut total) = (0usize, 0usize);
    for (name, t) in model.params.iter() {
        let old = before.get(name).unwrap();
        let shape = t.shape();
        for i in 0..t.len() {
            // a non-anchor position sees anchors only through the four
            // edge-adjacent taps of the spatial context kernel
            let (ky, kx) = ((i / shape.w) % shape.h, i % shape.w);
            if name.ends_with(".sp.w") && (ky + kx) % 2 == 0 {
                continue;
            }
            total += 1;
            moved += usize::from(t.data()[i] != old.data()[i]);
        }
    }
    assert!(moved as f64 >= 0.99 * total as f64, "{moved} of {total} parameters moved");
}
