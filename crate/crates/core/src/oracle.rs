//! Hand-built pixel-statistics camera classifier.
//!
//! Certifies that a synthetic camera bank is separable before any network
//! is trained: per-image high-pass residual statistics plus a quantization
//! step detector, classified by nearest standardized centroid.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::synth::SyntheticImage;

pub const NUM_FEATURES: usize = 5;

/// `[log residual variance, quantization step, 2x2 phase contrast (3)]`.
pub fn image_features(pixels: &Array3<f64>) -> [f64; NUM_FEATURES] {
    let (h, w, c) = pixels.dim();
    let mut sum2 = 0.0;
    let mut count = 0usize;
    let mut phase = [0.0f64; 4];
    let mut phase_n = [0usize; 4];
    for ch in 0..c {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let center = pixels[[y, x, ch]];
                let neigh = 0.25
                    * (pixels[[y - 1, x, ch]] + pixels[[y + 1, x, ch]] + pixels[[y, x - 1, ch]] + pixels[[y, x + 1, ch]]);
                let r = center - neigh;
                sum2 += r * r;
                count += 1;
                let diag = 0.25
                    * (pixels[[y - 1, x - 1, ch]]
                        + pixels[[y - 1, x + 1, ch]]
                        + pixels[[y + 1, x - 1, ch]]
                        + pixels[[y + 1, x + 1, ch]]);
                let p = (y % 2) * 2 + x % 2;
                if diag > 1e-3 {
                    phase[p] += center / diag;
                    phase_n[p] += 1;
                }
            }
        }
    }
    let var = sum2 / count.max(1) as f64;
    // Largest m in {4, 2, 1} dividing (almost) every 8-bit code.
    let codes: Vec<u32> = pixels.iter().map(|v| (v * 255.0).round() as u32).collect();
    let mut step = 1.0;
    for m in [4u32, 2] {
        let hits = codes.iter().filter(|&&q| q % m == 0).count();
        if hits as f64 >= 0.99 * codes.len() as f64 {
            step = m as f64;
            break;
        }
    }
    let mean_phase: Vec<f64> = (0..4).map(|p| phase[p] / phase_n[p].max(1) as f64).collect();
    [
        var.max(1e-12).ln(),
        step,
        mean_phase[1] - mean_phase[0],
        mean_phase[2] - mean_phase[0],
        mean_phase[3] - mean_phase[0],
    ]
}

/// Nearest-centroid classifier over standardized [`image_features`].
#[derive(Clone, Debug)]
pub struct StatsOracle {
    centroids: Vec<[f64; NUM_FEATURES]>,
    mean: [f64; NUM_FEATURES],
    std: [f64; NUM_FEATURES],
}

impl StatsOracle {
    pub fn fit(images: &[SyntheticImage], num_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("oracle training set".into()));
        }
        let feats: Vec<[f64; NUM_FEATURES]> = images.iter().map(|i| image_features(&i.pixels)).collect();
        let n = feats.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for f in &feats {
            for k in 0..NUM_FEATURES {
                mean[k] += f[k] / n;
            }
        }
        for f in &feats {
            for k in 0..NUM_FEATURES {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-9);
        }
        let mut centroids = vec![[0.0; NUM_FEATURES]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (f, img) in feats.iter().zip(images) {
            let c = img.camera_id;
            if c >= num_classes {
                return Err(Error::Domain(format!("camera id {c} >= {num_classes}")));
            }
            counts[c] += 1;
            for k in 0..NUM_FEATURES {
                centroids[c][k] += (f[k] - mean[k]) / std[k];
            }
        }
        for (cent, &cnt) in centroids.iter_mut().zip(&counts) {
            if cnt == 0 {
                return Err(Error::Empty("oracle class without images".into()));
            }
            for v in cent.iter_mut() {
                *v /= cnt as f64;
            }
        }
        Ok(Self { centroids, mean, std })
    }

    pub fn predict(&self, pixels: &Array3<f64>) -> usize {
        let f = image_features(pixels);
        let z: Vec<f64> = (0..NUM_FEATURES).map(|k| (f[k] - self.mean[k]) / self.std[k]).collect();
        let mut best = (0, f64::INFINITY);
        for (c, cent) in self.centroids.iter().enumerate() {
            let d: f64 = cent.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    pub fn accuracy(&self, images: &[SyntheticImage]) -> f64 {
        let ok = images.iter().filter(|i| self.predict(&i.pixels) == i.camera_id).count();
        ok as f64 / images.len().max(1) as f64
    }
}
