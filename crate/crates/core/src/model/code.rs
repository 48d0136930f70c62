use serde::{Deserialize, Serialize};

use super::config::{ScaleParam, MIN_SCALE};
use crate::error::{Error, Result};

/// Diagonal Gaussian code `N(mean, diag(scale^2))` produced by the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticCode {
    pub mean: Vec<f64>,
    /// Standard deviation per dimension, strictly positive.
    pub scale: Vec<f64>,
}

impl StochasticCode {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, scale has {}",
                mean.len(),
                scale.len()
            )));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {s}")));
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `[mean || scale]`, the signature used for localization.
    pub fn signature(&self) -> Vec<f64> {
        self.mean.iter().chain(&self.scale).copied().collect()
    }
}

/// Reparameterized draw `z = mean + scale * noise`.
pub fn sample_code(code: &StochasticCode, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != code.dim() {
        return Err(Error::Shape(format!(
            "noise has {} entries, code has {}",
            noise.len(),
            code.dim()
        )));
    }
    Ok(code
        .mean
        .iter()
        .zip(&code.scale)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a head pre-activation to a standard deviation, returning `(sigma, d sigma / d pre)`.
/// Values below [`MIN_SCALE`] are clamped and receive zero gradient.
pub(crate) fn scale_from_pre(pre: f64, param: ScaleParam) -> (f64, f64) {
    let (s, ds) = match param {
        ScaleParam::Softplus => (softplus(pre), sigmoid(pre)),
        ScaleParam::ExpHalfLogvar => {
            let s = (0.5 * pre).exp();
            (s, 0.5 * s)
        }
    };
    if s < MIN_SCALE {
        (MIN_SCALE, 0.0)
    } else {
        (s, ds)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
