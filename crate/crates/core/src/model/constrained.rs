//! Constrained convolution: filters pushed towards zero total weight so that
//! each one predicts the center pixel from its neighbours and outputs the
//! mismatch (a noise residual).

use ndarray::{Array3, ArrayView4, ArrayViewMut4, Axis};

use super::conv;
use super::ImagePatch;
use crate::error::{Error, Result};
use crate::model::ConstrainedConvSpec;

/// Valid convolution of `patch` with a `[S, S, in_channels, k]` filter bank.
pub fn constrained_conv_forward(
    patch: &ImagePatch,
    spec: &ConstrainedConvSpec,
    weights: ArrayView4<f64>,
) -> Result<Array3<f64>> {
    spec.validate()?;
    let expected = (spec.support, spec.support, spec.in_channels, spec.num_filters);
    if weights.dim() != expected {
        return Err(Error::Shape(format!(
            "filter bank is {:?}, expected {:?}",
            weights.dim(),
            expected
        )));
    }
    let (h, w, c) = patch.pixels.dim();
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "patch has {c} channels, filters expect {}",
            spec.in_channels
        )));
    }
    if h < spec.support || w < spec.support {
        return Err(Error::Shape(format!(
            "patch {h}x{w} smaller than support {}",
            spec.support
        )));
    }
    let input = patch.pixels.view().insert_axis(Axis(0));
    let weights = weights.as_standard_layout();
    let (out, _) = conv::forward(input, weights.view(), 0);
    Ok(out.index_axis_move(Axis(0), 0))
}

/// Per-filter weight sums, over all taps and input channels.
pub fn filter_sums(weights: ArrayView4<f64>) -> Vec<f64> {
    let k = weights.dim().3;
    (0..k)
        .map(|f| weights.index_axis(Axis(3), f).sum())
        .collect()
}

/// `sqrt(sum_k (sum of filter k)^2)`; zero iff every filter sums to zero.
pub fn constraint_penalty(weights: ArrayView4<f64>) -> f64 {
    filter_sums(weights).iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Gradient of [`constraint_penalty`]; every tap of filter `k` receives
/// `sum_k / penalty`. At the kink (penalty 0) the zero subgradient is used.
pub(crate) fn constraint_penalty_grad(weights: ArrayView4<f64>) -> (f64, Vec<f64>) {
    let sums = filter_sums(weights);
    let penalty = sums.iter().map(|s| s * s).sum::<f64>().sqrt();
    let per_filter = if penalty > 0.0 {
        sums.iter().map(|s| s / penalty).collect()
    } else {
        vec![0.0; sums.len()]
    };
    (penalty, per_filter)
}

/// Hard projection onto the constraint set: subtracts each filter's mean tap.
pub fn project_zero_sum(mut weights: ArrayViewMut4<f64>) {
    let k = weights.dim().3;
    for f in 0..k {
        let mut filter = weights.index_axis_mut(Axis(3), f);
        let mean = filter.mean().unwrap_or(0.0);
        filter.mapv_inplace(|v| v - mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn spec(k: usize, c: usize) -> ConstrainedConvSpec {
        ConstrainedConvSpec {
            num_filters: k,
            support: 3,
            in_channels: c,
        }
    }

    #[test]
    fn zero_weights_give_zero_residual() {
        let patch = ImagePatch::new(Array3::from_shape_fn((6, 6, 3), |(y, x, c)| {
            (y * 7 + x * 3 + c) as f64 / 50.0
        }));
        let w = Array4::zeros((3, 3, 3, 2));
        let out = constrained_conv_forward(&patch, &spec(2, 3), w.view()).unwrap();
        assert_eq!(out.dim(), (4, 4, 2));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_on_constant_patch_is_zero() {
        let patch = ImagePatch::new(Array3::from_elem((5, 5, 1), 0.37));
        let mut w = Array4::zeros((3, 3, 1, 1));
        for (y, x) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            w[[y, x, 0, 0]] = 1.0;
        }
        w[[1, 1, 0, 0]] = -4.0;
        let out = constrained_conv_forward(&patch, &spec(1, 1), w.view()).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn ramp_with_center_difference_matches_direct_sum() {
        // 5x5 single-channel ramp p(y, x) = 0.1 x + 0.03 y, horizontal center difference.
        let patch = ImagePatch::new(Array3::from_shape_fn((5, 5, 1), |(y, x, _)| {
            0.1 * x as f64 + 0.03 * y as f64
        }));
        let mut w = Array4::zeros((3, 3, 1, 1));
        w[[1, 0, 0, 0]] = -0.5;
        w[[1, 2, 0, 0]] = 0.5;
        let out = constrained_conv_forward(&patch, &spec(1, 1), w.view()).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let mut direct = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        direct += w[[ky, kx, 0, 0]] * patch.pixels[[y + ky, x + kx, 0]];
                    }
                }
                assert!((out[[y, x, 0]] - direct).abs() < 1e-15);
                assert!((out[[y, x, 0]] - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let patch = ImagePatch::new(Array3::zeros((5, 5, 3)));
        let w = Array4::zeros((3, 3, 1, 2));
        assert!(matches!(
            constrained_conv_forward(&patch, &spec(2, 3), w.view()),
            Err(Error::Shape(_))
        ));
        let tiny = ImagePatch::new(Array3::zeros((2, 2, 3)));
        let w = Array4::zeros((3, 3, 3, 2));
        assert!(constrained_conv_forward(&tiny, &spec(2, 3), w.view()).is_err());
    }

    #[test]
    fn penalty_examples() {
        let ones = Array4::from_elem((3, 3, 3, 1), 1.0);
        assert_eq!(constraint_penalty(ones.view()), 27.0);

        let mut w = Array4::zeros((3, 3, 1, 2));
        w[[0, 0, 0, 0]] = 3.0;
        w[[2, 1, 0, 1]] = 4.0;
        assert_eq!(constraint_penalty(w.view()), 5.0);

        let mut zs = Array4::from_shape_fn((3, 3, 3, 2), |(y, x, c, k)| {
            (y + 2 * x + c + k) as f64 * 0.1
        });
        for k in 0..2 {
            let others: f64 = zs.index_axis(Axis(3), k).sum() - zs[[1, 1, 0, k]];
            zs[[1, 1, 0, k]] = -others;
        }
        assert!(constraint_penalty(zs.view()).abs() < 1e-12);
    }
}
