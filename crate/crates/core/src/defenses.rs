//! Gradient-side defenses applied to packets before they leave an agent.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frlcore::GradientPacket;
use crate::numcore::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    None,
    Gaussian,
    Laplace,
    Quantize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Per-coordinate noise variance σ² for the noise kinds.
    #[serde(default)]
    pub variance: f64,
    /// Code width for quantization, 4 or 8.
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default)]
    pub seed: u64,
}

fn default_bits() -> u8 {
    8
}

impl Default for DefenseSpec {
    fn default() -> Self {
        DefenseSpec::none()
    }
}

impl DefenseSpec {
    pub fn none() -> Self {
        DefenseSpec {
            kind: DefenseKind::None,
            variance: 0.0,
            bits: default_bits(),
            seed: 0,
        }
    }

    pub fn gaussian(variance: f64, seed: u64) -> Self {
        DefenseSpec {
            kind: DefenseKind::Gaussian,
            variance,
            seed,
            ..Self::none()
        }
    }

    pub fn laplace(variance: f64, seed: u64) -> Self {
        DefenseSpec {
            kind: DefenseKind::Laplace,
            variance,
            seed,
            ..Self::none()
        }
    }

    pub fn quantize(bits: u8) -> Self {
        DefenseSpec {
            kind: DefenseKind::Quantize,
            bits,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::Gaussian | DefenseKind::Laplace
                if !(self.variance > 0.0 && self.variance.is_finite()) =>
            {
                Err(Error::Config(format!(
                    "noise defense needs a positive variance, got {}",
                    self.variance
                )))
            }
            DefenseKind::Quantize if !matches!(self.bits, 4 | 8) => Err(Error::Config(format!(
                "quantization supports 4 or 8 bits, got {}",
                self.bits
            ))),
            _ => Ok(()),
        }
    }

    /// Laplace scale `b` whose variance `2b²` equals σ².
    pub fn laplace_scale(&self) -> f64 {
        (self.variance / 2.0).sqrt()
    }

    pub fn is_none(&self) -> bool {
        self.kind == DefenseKind::None
    }

    /// Applies whichever defense this spec describes.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        packet: &GradientPacket,
        rng: &mut R,
    ) -> Result<GradientPacket> {
        self.validate()?;
        match self.kind {
            DefenseKind::None => Ok(packet.clone()),
            DefenseKind::Gaussian | DefenseKind::Laplace => apply_noise(packet, self, rng),
            DefenseKind::Quantize => quantize(packet, self.bits),
        }
    }
}

/// Adds i.i.d. zero-mean noise of variance σ² to every gradient coordinate.
pub fn apply_noise<R: Rng + ?Sized>(
    packet: &GradientPacket,
    spec: &DefenseSpec,
    rng: &mut R,
) -> Result<GradientPacket> {
    spec.validate()?;
    let noisy: Vec<f64> = match spec.kind {
        DefenseKind::None => return Ok(packet.clone()),
        DefenseKind::Gaussian => {
            let sd = spec.variance.sqrt();
            packet
                .grad
                .iter()
                .map(|g| {
                    let z: f64 = StandardNormal.sample(rng);
                    g + sd * z
                })
                .collect()
        }
        DefenseKind::Laplace => {
            let b = spec.laplace_scale();
            packet
                .grad
                .iter()
                .map(|g| {
                    let e: f64 = Exp1.sample(rng);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    g + sign * b * e
                })
                .collect()
        }
        DefenseKind::Quantize => {
            return Err(Error::invalid("apply_noise needs a noise defense"));
        }
    };
    Ok(GradientPacket {
        grad: Vector::new(noisy)?,
        defense: Some(spec.clone()),
        ..packet.clone()
    })
}

/// Symmetric per-packet quantization to `bits`-bit signed codes, transmitted
/// as the dequantized values.
pub fn quantize(packet: &GradientPacket, bits: u8) -> Result<GradientPacket> {
    let spec = DefenseSpec::quantize(bits);
    spec.validate()?;
    Ok(GradientPacket {
        grad: Vector::new(quantize_values(&packet.grad, bits))?,
        defense: Some(spec),
        ..packet.clone()
    })
}

pub fn quantize_values(values: &[f64], bits: u8) -> Vec<f64> {
    let scale = values.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if scale == 0.0 {
        return values.to_vec();
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    values
        .iter()
        .map(|g| (g / scale * levels).round() / levels * scale)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn packet(grad: Vec<f64>) -> GradientPacket {
        GradientPacket {
            agent_id: 0,
            round: 0,
            batch_size: 1,
            net_fingerprint: "f".into(),
            grad: Vector::new(grad).unwrap(),
            created_at: 0,
            defense: None,
        }
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn none_is_identity() {
        let p = packet(vec![0.1, -0.2]);
        let out = DefenseSpec::none()
            .apply(&p, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn gaussian_moments() {
        let p = packet(vec![0.0; 1_000_000]);
        let spec = DefenseSpec::gaussian(1e-2, 1);
        let out = apply_noise(&p, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (mean, var) = moments(&out.grad);
        assert!(mean.abs() < 3e-4, "mean {mean}");
        assert!((var - 1e-2).abs() < 0.02 * 1e-2, "var {var}");
        assert_eq!(out.defense.as_ref().unwrap().kind, DefenseKind::Gaussian);
        assert_eq!(out.grad.len(), p.grad.len());
        assert_eq!(out.net_fingerprint, p.net_fingerprint);
    }

    #[test]
    fn laplace_variance_matches_sigma_squared() {
        let p = packet(vec![0.0; 1_000_000]);
        let spec = DefenseSpec::laplace(1e-2, 2);
        let out = apply_noise(&p, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (mean, var) = moments(&out.grad);
        assert!(mean.abs() < 3e-4, "mean {mean}");
        assert!((var - 1e-2).abs() < 0.03 * 1e-2, "var {var}");
    }

    #[test]
    fn noise_requires_positive_variance() {
        assert!(DefenseSpec::gaussian(0.0, 0).validate().is_err());
        assert!(DefenseSpec::quantize(6).validate().is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(
            quantize(&packet(vec![0.0; 5]), 8).unwrap().grad.as_slice(),
            &[0.0; 5]
        );
        let q = quantize(&packet(vec![1.0, 0.5]), 8).unwrap();
        assert_eq!(q.grad[1], 64.0 / 127.0);
        let q = quantize(&packet(vec![1.0, 0.496]), 8).unwrap();
        assert!((q.grad[1] - 0.496_062_992_125_984_3).abs() < 1e-15);
        assert_eq!(quantize(&q, 8).unwrap().grad, q.grad);
    }

    #[test]
    fn quantize_error_bound_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let g: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
            let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let q8 = quantize_values(&g, 8);
            let q4 = quantize_values(&g, 4);
            let err = |q: &[f64]| {
                g.iter()
                    .zip(q)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            };
            assert!(err(&q8) <= scale / (2.0 * 127.0) + 1e-12);
            assert!(err(&q4) > err(&q8));
        }
    }
}
