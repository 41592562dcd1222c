//! Real-valued AWGN channels between Alice and Bob / Alice and Eve.
//!
//! Codewords are power-normalised per batch before they go on the air, so
//! every channel in this crate assumes unit average symbol power and an SNR
//! of `snr_db` means a per-symbol noise variance of `10^(-snr_db / 10)`.

use candle_core::{DType, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One AWGN channel realisation: an SNR and the seed of its noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    /// Signal-to-noise ratio in dB; `+inf` means a noiseless link.
    pub snr_db: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ChannelSpec {
    pub fn new(snr_db: f64, seed: u64) -> Result<Self> {
        let spec = ChannelSpec { snr_db, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noiseless(seed: u64) -> Self {
        ChannelSpec {
            snr_db: f64::INFINITY,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!(
                "snr_db must be finite or +inf, got {}",
                self.snr_db
            )));
        }
        Ok(())
    }

    /// Per-symbol noise standard deviation for unit-power codewords.
    pub fn sigma(&self) -> Result<f64> {
        noise_sigma(self, 1.0)
    }
}

/// σ = sqrt(P · 10^(−snr_db/10)); zero for an infinite SNR.
pub fn noise_sigma(spec: &ChannelSpec, signal_power: f64) -> Result<f64> {
    spec.validate()?;
    if !(signal_power > 0.0 && signal_power.is_finite()) {
        return Err(Error::Input(format!(
            "signal power must be positive, got {signal_power}"
        )));
    }
    if spec.snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    Ok((signal_power * 10f64.powf(-spec.snr_db / 10.0)).sqrt())
}

/// Mean squared amplitude per symbol over the whole batch.
pub fn average_power(batch: &Tensor) -> Result<f64> {
    Ok(batch
        .to_dtype(DType::F64)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?)
}

/// Scales a `(B, M)` batch by one scalar so its average symbol power is 1.
///
/// The scale is part of the autograd graph, so gradients flow through the
/// normalisation during training.
pub fn normalize_power(batch: &Tensor) -> Result<Tensor> {
    if batch.elem_count() == 0 {
        return Err(Error::Degenerate("empty codeword batch".into()));
    }
    let power = batch.sqr()?.mean_all()?;
    if power.to_dtype(DType::F64)?.to_scalar::<f64>()? <= 0.0 {
        return Err(Error::Degenerate(
            "cannot normalise an all-zero codeword batch".into(),
        ));
    }
    Ok(batch.broadcast_div(&power.sqrt()?)?)
}

/// A seeded stream of Gaussian channel noise.
///
/// Bob's and Eve's channels each own a stream; a stream must not be shared
/// between concurrent consumers.
pub struct NoiseSource {
    rng: rng::Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            rng: rng::seeded(rng::derive(seed, "awgn")),
        }
    }

    /// A tensor shaped like `like` filled with N(0, σ²) draws.
    pub fn noise_like(&mut self, like: &Tensor, sigma: f64) -> Result<Tensor> {
        let n = like.elem_count();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                sigma * z
            })
            .collect();
        Ok(Tensor::from_vec(values, like.shape(), like.device())?.to_dtype(like.dtype())?)
    }

    /// ŷ = y + z. With σ = 0 the input is returned unchanged, bit for bit.
    pub fn transmit(&mut self, y: &Tensor, sigma: f64) -> Result<Tensor> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Input(format!("invalid noise sigma {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(y.clone());
        }
        let z = self.noise_like(y, sigma)?;
        Ok((y + z)?)
    }
}

/// Sends unit-power codewords through the channel described by `spec`.
pub fn awgn_transmit(y: &Tensor, spec: &ChannelSpec) -> Result<Tensor> {
    let sigma = spec.sigma()?;
    NoiseSource::new(spec.seed).transmit(y, sigma)
}

/// Empirical SNR in dB measured from a clean and a received batch.
pub fn measured_snr_db(clean: &Tensor, received: &Tensor) -> Result<f64> {
    let noise = (received.to_dtype(DType::F64)? - clean.to_dtype(DType::F64)?)?;
    let noise_power = average_power(&noise)?;
    let signal_power = average_power(clean)?;
    Ok(10.0 * (signal_power / noise_power).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn randn(n: usize, seed: u64, scale: f64) -> Tensor {
        let t = NoiseSource::new(seed)
            .noise_like(&Tensor::zeros((n / 8, 8), DType::F64, &Device::Cpu).unwrap(), 1.0)
            .unwrap();
        (t * scale).unwrap()
    }

    #[test]
    fn sigma_examples() {
        let s = |db: f64| noise_sigma(&ChannelSpec::new(db, 0).unwrap(), 1.0).unwrap();
        assert_eq!(s(0.0), 1.0);
        assert_eq!(s(f64::INFINITY), 0.0);
        assert!((s(10.0).powi(2) - 0.1).abs() < 1e-12);
        assert!((noise_sigma(&ChannelSpec::new(10.0, 0).unwrap(), 4.0).unwrap() - 0.4f64.sqrt()).abs() < 1e-12);
        assert!(ChannelSpec::new(f64::NAN, 0).is_err());
        assert!(noise_sigma(&ChannelSpec::new(0.0, 0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn normalisation_examples() {
        let y = randn(4096, 1, 0.3);
        let n = normalize_power(&y).unwrap();
        assert!((average_power(&n).unwrap() - 1.0).abs() < 1e-6);
        let again = normalize_power(&n).unwrap();
        let diff = (again - &n).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
        let scaled = normalize_power(&(&y * 3.0).unwrap()).unwrap();
        let diff = (scaled - &n).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn all_zero_batch_is_degenerate() {
        let z = Tensor::zeros((4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(normalize_power(&z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn noiseless_link_is_exact() {
        let y = randn(64, 3, 1.0);
        let out = awgn_transmit(&y, &ChannelSpec::noiseless(9)).unwrap();
        assert_eq!(out.to_vec2::<f64>().unwrap(), y.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn noise_statistics_at_unit_sigma() {
        let y = Tensor::zeros((125_000, 8), DType::F64, &Device::Cpu).unwrap();
        let out = awgn_transmit(&y, &ChannelSpec::new(0.0, 42).unwrap()).unwrap();
        let v: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let y = randn(80, 5, 1.0);
        let spec = ChannelSpec::new(3.0, 17).unwrap();
        let a = awgn_transmit(&y, &spec).unwrap().to_vec2::<f64>().unwrap();
        let b = awgn_transmit(&y, &spec).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
    }
}
