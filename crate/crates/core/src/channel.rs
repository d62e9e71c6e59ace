//! Complex AWGN channel with unit average power normalization.
//!
//! Complex symbols are stored as interleaved real pairs `[re0, im0, re1, im1, ...]`.
//! Noise is applied per real component with variance `sigma_sq / 2`, which gives a
//! per-complex-symbol variance of `sigma_sq`.

use candle_core::Tensor;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// Average power every normalized codeword is scaled to.
pub const P_AVG: f64 = 1.0;

/// Converts a per-hop SNR in dB to the complex noise variance `10^(-snr_db / 10)`.
pub fn snr_to_noise_variance(snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
    }
    Ok(10f64.powf(-snr_db / 10.0))
}

/// SNR together with the noise variance it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub sigma_sq: f64,
}

impl NoiseSpec {
    pub fn from_snr_db(snr_db: f64) -> Result<Self> {
        Ok(Self {
            snr_db,
            sigma_sq: snr_to_noise_variance(snr_db)?,
        })
    }
}

/// A vector of `k` complex channel symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCodeword {
    data: Vec<f64>,
}

impl ChannelCodeword {
    /// Wraps interleaved real/imaginary components without rescaling.
    pub fn from_interleaved(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || data.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "codeword needs a positive even number of real components, got {}",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    /// Number of complex channel uses.
    pub fn k(&self) -> usize {
        self.data.len() / 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn symbols(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1]))
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `(1/k)·‖x‖²`.
    pub fn average_power(&self) -> f64 {
        self.energy() / self.k() as f64
    }
}

/// Scales `raw` so that `(1/k)·‖x‖² = P_AVG` exactly.
pub fn normalize_power(raw: &[f64]) -> Result<ChannelCodeword> {
    if raw.len() < 2 || raw.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "codeword needs a positive even number of real components, got {}",
            raw.len()
        )));
    }
    let energy: f64 = raw.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateCodeword);
    }
    let k = (raw.len() / 2) as f64;
    let scale = (k * P_AVG).sqrt() / energy.sqrt();
    Ok(ChannelCodeword {
        data: raw.iter().map(|v| v * scale).collect(),
    })
}

/// Real-domain noise samples with variance `sigma_sq / 2` each, deterministic in `seed`.
pub fn gaussian_noise(len: usize, sigma_sq: f64, seed: u64) -> Vec<f64> {
    let std = (sigma_sq / 2.0).sqrt();
    let mut rng = seed::rng(seed);
    (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

fn check_sigma(sigma_sq: f64) -> Result<()> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be finite and non-negative, got {sigma_sq}"
        )));
    }
    Ok(())
}

/// `y = x + n` with `n ~ CN(0, sigma_sq·I_k)`.
pub fn awgn(x: &ChannelCodeword, sigma_sq: f64, rng_seed: u64) -> Result<ChannelCodeword> {
    check_sigma(sigma_sq)?;
    if sigma_sq == 0.0 {
        return Ok(x.clone());
    }
    let noise = gaussian_noise(x.data.len(), sigma_sq, rng_seed);
    Ok(ChannelCodeword {
        data: x.data.iter().zip(noise).map(|(a, n)| a + n).collect(),
    })
}

/// Batched [`normalize_power`] over the rows of a `(B, 2k)` tensor; differentiable.
pub fn normalize_power_tensor(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "codeword rows need a positive even length, got {n}"
        )));
    }
    let energy = x.sqr()?.sum_keepdim(1)?;
    let min_energy = energy
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if min_energy == 0.0 {
        return Err(Error::DegenerateCodeword);
    }
    let k = (n / 2) as f64;
    let scale = energy.recip()?.affine(k * P_AVG, 0.0)?.sqrt()?;
    Ok(x.broadcast_mul(&scale)?)
}

/// Batched [`awgn`]: row `i` of the `(B, 2k)` tensor receives the noise realization of
/// `seeds[i]`, identical to what [`awgn`] draws for that seed.
pub fn awgn_tensor(x: &Tensor, sigma_sq: f64, seeds: &[u64]) -> Result<Tensor> {
    check_sigma(sigma_sq)?;
    let (b, n) = x.dims2()?;
    if seeds.len() != b {
        return Err(Error::InvalidArgument(format!(
            "need one noise seed per row: {b} rows, {} seeds",
            seeds.len()
        )));
    }
    if sigma_sq == 0.0 {
        return Ok(x.clone());
    }
    let mut noise = Vec::with_capacity(b * n);
    for &s in seeds {
        noise.extend(gaussian_noise(n, sigma_sq, s));
    }
    let noise = Tensor::from_vec(noise, (b, n), x.device())?.to_dtype(x.dtype())?;
    Ok((x + noise)?)
}
