//! Latent quantization and its training-time surrogates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{round_half_away, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Noise,
    /// Straight-through rounding: round forward, identity backward.
    Ste,
    /// Noise on the rate path, straight-through rounding on the
    /// distortion path.
    Hybrid,
    /// Rounding without a gradient; inference only.
    Hard,
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "ste" => Ok(Self::Ste),
            "hybrid" => Ok(Self::Hybrid),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::invalid(format!("unknown quantization mode `{s}`"))),
        }
    }
}

/// Output of [`quantize`]: the value fed to the rate term and the value
/// fed to the synthesis transform and context model. They coincide except
/// in [`QuantMode::Hybrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub rate: Var,
    pub distortion: Var,
}

/// Uniform noise in `[-0.5, 0.5)` drawn from a seeded stream. `stream`
/// separates independent draws made with the same seed.
pub fn uniform_noise(shape: Shape, seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..shape.numel()).map(|_| rng.gen::<f64>() - 0.5).collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// `round(y - mu) + mu`, or plain rounding when `mean` is absent.
pub fn quantize_hard(y: &Tensor, mean: Option<&Tensor>) -> Result<Tensor> {
    match mean {
        None => Ok(y.map(round_half_away)),
        Some(mu) => y.zip_map(mu, "quantize", |v, m| round_half_away(v - m) + m),
    }
}

/// Integer symbols `round(y - mu)`.
pub fn quantize_symbols(y: &Tensor, mean: Option<&Tensor>) -> Result<Tensor> {
    match mean {
        None => Ok(y.map(round_half_away)),
        Some(mu) => y.zip_map(mu, "quantize", |v, m| round_half_away(v - m)),
    }
}

/// Quantizes `y` on the tape.
///
/// Noise and hybrid modes need `seed`; `stream` tags the draw so separate
/// calls sharing a seed get independent noise. Hard mode refuses inputs
/// that require a gradient.
pub fn quantize(tape: &mut Tape, y: Var, mode: QuantMode, mean: Option<Var>, seed: Option<u64>, stream: u64) -> Result<Quantized> {
    let noisy = |tape: &mut Tape| -> Result<Var> {
        let seed = seed.ok_or_else(|| Error::invalid("noise quantization needs a seed"))?;
        let u = tape.constant(uniform_noise(tape.shape(y), seed, stream));
        tape.add(y, u)
    };
    let ste = |tape: &mut Tape| -> Result<Var> {
        match mean {
            None => Ok(tape.round_ste(y)),
            Some(mu) => {
                let r = tape.sub(y, mu)?;
                let r = tape.round_ste(r);
                tape.add(r, mu)
            }
        }
    };
    match mode {
        QuantMode::Noise => {
            let v = noisy(tape)?;
            Ok(Quantized { rate: v, distortion: v })
        }
        QuantMode::Ste => {
            let v = ste(tape)?;
            Ok(Quantized { rate: v, distortion: v })
        }
        QuantMode::Hybrid => {
            let rate = noisy(tape)?;
            let distortion = ste(tape)?;
            Ok(Quantized { rate, distortion })
        }
        QuantMode::Hard => {
            if tape.requires_grad(y) || mean.is_some_and(|m| tape.requires_grad(m)) {
                return Err(Error::NonDifferentiable(
                    "hard quantization has no gradient; use noise, ste or hybrid for training".into(),
                ));
            }
            let q = quantize_hard(tape.value(y), mean.map(|m| tape.value(m)))?;
            let v = tape.constant(q);
            Ok(Quantized { rate: v, distortion: v })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn hard_rounding_examples() {
        let q = quantize_hard(&t(&[0.49, 0.5, -0.5, 1.7, -2.5]), None).unwrap();
        assert_eq!(q.data(), &[0.0, 1.0, -1.0, 2.0, -3.0]);
        let q = quantize_hard(&t(&[0.49]), Some(&t(&[0.2]))).unwrap();
        assert!((q.data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let s = Shape::new(2, 3, 8, 8);
        let a = uniform_noise(s, 7, 0);
        let b = uniform_noise(s, 7, 0);
        let c = uniform_noise(s, 7, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (-0.5..0.5).contains(&v)));
    }

    #[test]
    fn noise_mode_stays_within_half() {
        let mut tape = Tape::new();
        let y = tape.leaf(t(&[0.3, -1.2, 4.9, 0.0]), true);
        let q = quantize(&mut tape, y, QuantMode::Noise, None, Some(3), 0).unwrap();
        for (a, b) in tape.value(q.rate).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() <= 0.5);
        }
        assert!(quantize(&mut tape, y, QuantMode::Noise, None, None, 0).is_err());
    }

    #[test]
    fn ste_has_identity_gradient() {
        let mut tape = Tape::new();
        let y = tape.leaf(t(&[0.3, -1.7, 2.5]), true);
        let mu = tape.constant(t(&[0.1, 0.2, 0.3]));
        let q = quantize(&mut tape, y, QuantMode::Ste, Some(mu), None, 0).unwrap();
        let s = tape.sum(q.distortion);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn hybrid_splits_paths() {
        let mut tape = Tape::new();
        let y = tape.leaf(t(&[0.3, -1.7]), true);
        let q = quantize(&mut tape, y, QuantMode::Hybrid, None, Some(1), 0).unwrap();
        assert_ne!(q.rate, q.distortion);
        assert_eq!(tape.value(q.distortion).data(), &[0.0, -2.0]);
    }

    #[test]
    fn hard_mode_refuses_gradients() {
        let mut tape = Tape::new();
        let y = tape.leaf(t(&[0.3]), true);
        let err = quantize(&mut tape, y, QuantMode::Hard, None, None, 0).unwrap_err();
        assert!(matches!(err, Error::NonDifferentiable(_)));
        let c = tape.constant(t(&[0.3]));
        let q = quantize(&mut tape, c, QuantMode::Hard, None, None, 0).unwrap();
        assert_eq!(tape.value(q.rate).data(), &[0.0]);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("hybrid".parse::<QuantMode>().unwrap(), QuantMode::Hybrid);
        assert!("round".parse::<QuantMode>().is_err());
    }
}
