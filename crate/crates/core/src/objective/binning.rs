//! Histogram (plug-in) mutual-information estimator, kept as an offline
//! diagnostic next to the variational rate.

use std::collections::HashMap;

use ndarray::{ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FingerprintModel;

/// Equal-width bins over a fixed range, applied to every dimension of a variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub num_bins: usize,
    /// Inclusive `(low, high)` range per dimension of X.
    pub x_ranges: Vec<(f64, f64)>,
    /// Inclusive `(low, high)` range per dimension of Z.
    pub z_ranges: Vec<(f64, f64)>,
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!("num_bins must be >= 2, got {}", self.num_bins)));
        }
        for &(lo, hi) in self.x_ranges.iter().chain(&self.z_ranges) {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid bin range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn quantize(samples: &[Vec<f64>], ranges: &[(f64, f64)], bins: usize, what: &str) -> Result<Vec<Vec<u32>>> {
    samples
        .iter()
        .map(|s| {
            if s.len() != ranges.len() {
                return Err(Error::Shape(format!(
                    "{what} sample has {} dims, config has {}",
                    s.len(),
                    ranges.len()
                )));
            }
            s.iter()
                .zip(ranges)
                .map(|(&v, &(lo, hi))| {
                    if !(v >= lo && v <= hi) {
                        return Err(Error::Domain(format!("{what} value {v} outside [{lo}, {hi}]")));
                    }
                    let b = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
                    Ok(b.min(bins - 1) as u32)
                })
                .collect()
        })
        .collect()
}

/// Plug-in MI `sum p(x,z) ln(p(x,z) / (p(x) p(z)))` of two discrete label sequences.
pub fn plugin_mi<X, Z>(xs: &[X], zs: &[Z]) -> Result<f64>
where
    X: std::hash::Hash + Eq + Clone,
    Z: std::hash::Hash + Eq + Clone,
{
    if xs.is_empty() {
        return Err(Error::Empty("MI sample set".into()));
    }
    if xs.len() != zs.len() {
        return Err(Error::Shape(format!("{} x samples vs {} z samples", xs.len(), zs.len())));
    }
    let n = xs.len() as f64;
    let mut px: HashMap<&X, usize> = HashMap::new();
    let mut pz: HashMap<&Z, usize> = HashMap::new();
    let mut pxz: HashMap<(&X, &Z), usize> = HashMap::new();
    for (x, z) in xs.iter().zip(zs) {
        *px.entry(x).or_default() += 1;
        *pz.entry(z).or_default() += 1;
        *pxz.entry((x, z)).or_default() += 1;
    }
    // Sum in a fixed order so the estimate does not depend on hash iteration.
    let mut terms: Vec<f64> = pxz
        .iter()
        .map(|((x, z), &c)| {
            let c = c as f64;
            let cx = px[x] as f64;
            let cz = pz[z] as f64;
            c / n * (c * n / (cx * cz)).ln()
        })
        .collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    Ok(terms.iter().sum::<f64>().max(0.0))
}

/// Binned MI between two multivariate sample sets, in nats.
pub fn binned_mi(samples_x: &[Vec<f64>], samples_z: &[Vec<f64>], config: &BinningConfig) -> Result<f64> {
    config.validate()?;
    if samples_x.is_empty() || samples_z.is_empty() {
        return Err(Error::Empty("MI sample set".into()));
    }
    if samples_x.len() != samples_z.len() {
        return Err(Error::Shape(format!(
            "{} x samples vs {} z samples",
            samples_x.len(),
            samples_z.len()
        )));
    }
    let qx = quantize(samples_x, &config.x_ranges, config.num_bins, "x")?;
    let qz = quantize(samples_z, &config.z_ranges, config.num_bins, "z")?;
    plugin_mi(&qx, &qz)
}

/// Binned MI between patch mean intensity (the semantic summary) and the
/// first `dims` coordinates of the code mean; code ranges are taken from the
/// observed extremes.
pub fn patch_code_mi(model: &FingerprintModel, patches: ArrayView4<f64>, num_bins: usize, dims: usize) -> Result<f64> {
    let codes = model.encode_batch(patches)?;
    let dims = dims.min(model.code_dim()).max(1);
    let xs: Vec<Vec<f64>> = patches
        .axis_iter(Axis(0))
        .map(|p| vec![p.mean().unwrap_or(0.0).clamp(0.0, 1.0)])
        .collect();
    let zs: Vec<Vec<f64>> = codes.iter().map(|c| c.mean[..dims].to_vec()).collect();
    let mut z_ranges = Vec::with_capacity(dims);
    for j in 0..dims {
        let lo = zs.iter().map(|z| z[j]).fold(f64::INFINITY, f64::min);
        let hi = zs.iter().map(|z| z[j]).fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        z_ranges.push((lo, hi));
    }
    binned_mi(
        &xs,
        &zs,
        &BinningConfig {
            num_bins,
            x_ranges: vec![(0.0, 1.0)],
            z_ranges,
        },
    )
}
