//! Per-channel batch normalization over the trailing (channel) axis.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one normalization layer, frozen at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub(crate) fn update(&mut self, batch: &BatchMoments) {
        let m = batch.count as f64;
        let unbias = if batch.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
        }
    }
}

/// Batch mean and (biased) variance observed in a training forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BatchMoments {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Training-mode forward: normalizes with the batch statistics.
pub(crate) fn forward_train(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, NormCache, BatchMoments) {
    let rows = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows as f64;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &gamma + &beta;
    (
        y,
        NormCache { xhat, inv_std },
        BatchMoments {
            mean,
            var,
            count: rows,
        },
    )
}

pub(crate) fn forward_eval(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    stats: &NormStats,
) -> Array2<f64> {
    let mean = ArrayView1::from(&stats.mean[..]);
    let scale: Array1<f64> = stats
        .var
        .iter()
        .zip(gamma.iter())
        .map(|(v, g)| g / (v + BN_EPS).sqrt())
        .collect();
    (&x - &mean) * &scale + &beta
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub(crate) fn backward(
    dy: ArrayView2<f64>,
    cache: &NormCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = dy.nrows() as f64;
    let d_beta = dy.sum_axis(Axis(0));
    let d_gamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let scale = &cache.inv_std / m;
    let dx = (dxhat * m - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &scale;
    (dx, d_gamma, d_beta)
}
