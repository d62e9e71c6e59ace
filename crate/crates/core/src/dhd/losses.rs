//! Self-distilled hashing, quantization and hash-proxy losses, in scalar and batched form.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::HashVector;
use crate::error::{Error, Result};

/// Clamp applied to Gaussian likelihoods before taking logarithms.
pub const LIKELIHOOD_EPS: f64 = 1e-7;

/// Hyperparameters of the hash-module objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DhdObjective {
    /// Softmax temperature of the proxy loss.
    pub tau: f64,
    /// Width of the Gaussian likelihoods in the quantization loss.
    pub sigma_g: f64,
    pub lambda_sdh: f64,
    pub lambda_bceq: f64,
}

impl Default for DhdObjective {
    fn default() -> Self {
        Self {
            tau: 0.2,
            sigma_g: 0.5,
            lambda_sdh: 0.1,
            lambda_bceq: 0.1,
        }
    }
}

impl DhdObjective {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma_g > 0.0) {
            return Err(Error::Config(format!(
                "tau and sigma_g must be positive, got {} and {}",
                self.tau, self.sigma_g
            )));
        }
        if !(self.lambda_sdh >= 0.0) || !(self.lambda_bceq >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation of the hash-module objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhdLossParts {
    pub hp: f64,
    pub sdh: f64,
    pub bceq: f64,
    pub total: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − cos(h_T, h_S)`, in `[0, 2]`.
pub fn sdh_loss(h_t: &HashVector, h_s: &HashVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(h_t.as_slice(), h_s.as_slice())?)
}

fn binary_entropy_log2(b: f64, g: f64) -> f64 {
    let g = g.clamp(LIKELIHOOD_EPS, 1.0 - LIKELIHOOD_EPS);
    -(b * g.log2() + (1.0 - b) * (1.0 - g).log2())
}

/// Quantization loss averaged over the `N_H` components.
///
/// Labels are `b⁺ = 1` for `h ≥ 0` and `0` otherwise. At `h = 0` the two likelihoods
/// coincide and the per-component loss does not depend on the label.
pub fn bce_q_loss(h: &HashVector, sigma_g: f64) -> Result<f64> {
    if !(sigma_g > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_g must be positive, got {sigma_g}")));
    }
    let two_var = 2.0 * sigma_g * sigma_g;
    let sum: f64 = h
        .as_slice()
        .iter()
        .map(|&v| {
            let g_pos = (-(v - 1.0).powi(2) / two_var).exp();
            let g_neg = (-(v + 1.0).powi(2) / two_var).exp();
            let b_pos = if v >= 0.0 { 1.0 } else { 0.0 };
            binary_entropy_log2(b_pos, g_pos) + binary_entropy_log2(1.0 - b_pos, g_neg)
        })
        .sum();
    Ok(sum / h.len() as f64)
}

fn check_labels(c: &[u8]) -> Result<f64> {
    let total: f64 = c.iter().map(|v| *v as f64).sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("label vector has no positive class".into()));
    }
    Ok(total)
}

/// Cross-entropy between the normalized label vector and a temperature softmax over
/// cosine similarities of `h_T` to every proxy, using the natural logarithm.
pub fn hash_proxy_loss(c: &[u8], h_t: &HashVector, proxies: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let total = check_labels(c)?;
    if c.len() != proxies.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} proxies",
            c.len(),
            proxies.len()
        )));
    }
    let logits = proxies
        .iter()
        .map(|p| Ok(cosine_similarity(p, h_t.as_slice())? / tau))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(c.iter()
        .zip(&logits)
        .map(|(ci, l)| -(*ci as f64 / total) * (l - log_z))
        .sum())
}

/// Row-wise cosine similarity of two `(B, N)` tensors, shape `(B,)`.
pub fn cosine_similarity_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() || a.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "cosine needs equal (B, N) shapes, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    if na.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0
        || nb.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0
    {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na * nb)?)?)
}

/// Batch mean of `1 − cos(h_T, h_S)`.
pub fn sdh_loss_tensor(h_t: &Tensor, h_s: &Tensor) -> Result<Tensor> {
    Ok(cosine_similarity_tensor(h_t, h_s)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Batch mean of the quantization loss of `(B, N_H)` hashes; labels are detached.
pub fn bce_q_loss_tensor(h: &Tensor, sigma_g: f64) -> Result<Tensor> {
    if !(sigma_g > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_g must be positive, got {sigma_g}")));
    }
    let inv = 1.0 / (2.0 * sigma_g * sigma_g);
    let g_pos = ((h - 1.0)?.sqr()? * -inv)?.exp()?;
    let g_neg = ((h + 1.0)?.sqr()? * -inv)?.exp()?;
    let b_pos = h.detach().ge(0.0)?.to_dtype(h.dtype())?;
    let b_neg = b_pos.affine(-1.0, 1.0)?;
    let ln2 = std::f64::consts::LN_2;
    let term = |b: &Tensor, g: &Tensor| -> Result<Tensor> {
        let g = g.clamp(LIKELIHOOD_EPS, 1.0 - LIKELIHOOD_EPS)?;
        let one_minus = g.affine(-1.0, 1.0)?;
        let inner = ((b * g.log()?)? + (b.affine(-1.0, 1.0)? * one_minus.log()?)?)?;
        Ok((inner * (-1.0 / ln2))?)
    };
    let per = (term(&b_pos, &g_pos)? + term(&b_neg, &g_neg)?)?;
    Ok(per.mean(D::Minus1)?.mean_all()?)
}

/// Batch mean of the proxy loss. `labels` is `(B, N_cls)` multi-hot, `h_t` is `(B, N_H)` and
/// `proxies` is `(N_cls, N_H)`.
pub fn hash_proxy_loss_tensor(labels: &Tensor, h_t: &Tensor, proxies: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let totals = labels.sum_keepdim(D::Minus1)?;
    if totals.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0 {
        return Err(Error::InvalidArgument("label vector has no positive class".into()));
    }
    let unit = |t: &Tensor| -> Result<Tensor> {
        Ok(t.broadcast_div(&t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)?)
    };
    let cos = unit(h_t)?.matmul(&unit(proxies)?.t()?)?;
    let log_p = candle_nn::ops::log_softmax(&(cos / tau)?, D::Minus1)?;
    let target = labels.broadcast_div(&totals)?;
    Ok((target * log_p)?.sum(D::Minus1)?.neg()?.mean_all()?)
}
