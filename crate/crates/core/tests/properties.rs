use ibfp::localization::{
    fit_gmm2_data, otsu_threshold, splice_probability, upsample_cells, CovarianceKind, EmConfig, SignatureField, Upsample,
};
use ibfp::metrics::{confusion, mcc, optimal_threshold, roc_auc, score_at, Metric};
use ibfp::model::{constraint_penalty, project_zero_sum, StochasticCode};
use ibfp::objective::{plugin_mi, rate_kl};
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn map_and_truth(max: usize) -> impl Strategy<Value = (Array2<f64>, Array2<bool>)> {
    (2..max, 2..max).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..12, h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_filter("both classes", |(_, t)| t.iter().any(|&b| b) && t.iter().any(|&b| !b))
            .prop_map(move |(v, t)| {
                (
                    Array2::from_shape_vec((h, w), v.into_iter().map(|x| x as f64 / 11.0).collect()).unwrap(),
                    Array2::from_shape_vec((h, w), t).unwrap(),
                )
            })
    })
}

fn pairwise_auc(map: &Array2<f64>, truth: &Array2<bool>) -> f64 {
    let pos: Vec<f64> = map.iter().zip(truth).filter(|(_, &t)| t).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = map.iter().zip(truth).filter(|(_, &t)| !t).map(|(v, _)| *v).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(mean in prop::collection::vec(-5.0f64..5.0, 1..6), log_s in prop::collection::vec(-3.0f64..2.0, 6)) {
        let scale: Vec<f64> = log_s[..mean.len()].iter().map(|l| l.exp()).collect();
        let code = StochasticCode::new(mean, scale).unwrap();
        prop_assert!(rate_kl(&code).unwrap() >= 0.0);
    }

    #[test]
    fn projection_zeroes_penalty(w in prop::collection::vec(-1.0f64..1.0, 3 * 3 * 2 * 4)) {
        let mut bank = Array4::from_shape_vec((3, 3, 2, 4), w).unwrap();
        project_zero_sum(bank.view_mut());
        prop_assert!(constraint_penalty(bank.view()) < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_oracle((map, truth) in map_and_truth(12)) {
        let auc = roc_auc(map.view(), truth.view()).unwrap();
        prop_assert!((auc - pairwise_auc(&map, &truth)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_to_monotone_transform((map, truth) in map_and_truth(10), k in 0.5f64..4.0) {
        let warped = map.mapv(|v| (k * v).exp() / (1.0 + (k * v).exp()));
        let a = roc_auc(map.view(), truth.view()).unwrap();
        let b = roc_auc(warped.view(), truth.view()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mcc_is_antisymmetric(pred in prop::collection::vec(any::<bool>(), 30), truth in prop::collection::vec(any::<bool>(), 30)) {
        let p = Array2::from_shape_vec((5, 6), pred).unwrap();
        let t = Array2::from_shape_vec((5, 6), truth).unwrap();
        let not_p = p.mapv(|v| !v);
        let a = mcc(&confusion(p.view(), t.view()).unwrap());
        let b = mcc(&confusion(not_p.view(), t.view()).unwrap());
        prop_assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn optimal_dominates_otsu((map, truth) in map_and_truth(12)) {
        if let Ok(t) = otsu_threshold(map.view()) {
            for metric in [Metric::F1, Metric::Mcc] {
                let (_, best) = optimal_threshold(map.view(), truth.view(), metric).unwrap();
                let otsu = score_at(map.view(), truth.view(), t, metric).unwrap();
                prop_assert!(best >= otsu - 1e-12, "{metric:?}: {best} < {otsu}");
            }
        }
    }

    #[test]
    fn plugin_mi_ignores_sample_order(xs in prop::collection::vec(0u8..4, 40), zs in prop::collection::vec(0u8..3, 40), rot in 0usize..40) {
        let a = plugin_mi(&xs, &zs).unwrap();
        let mut xr = xs.clone();
        let mut zr = zs.clone();
        xr.rotate_left(rot);
        zr.rotate_left(rot);
        let b = plugin_mi(&xr, &zr).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn heatmap_ignores_component_order(seed in 0u64..1000) {
        let field = clustered_field(seed);
        let gmm = fit_gmm2_data(field.features.view(), &EmConfig { covariance: CovarianceKind::Diagonal, ..EmConfig::default() }).unwrap();
        let a = splice_probability(&field, &gmm, Upsample::Average).unwrap();
        let b = splice_probability(&field, &gmm.swapped(), Upsample::Average).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn tiling_broadcast_keeps_cell_values(cells in prop::collection::vec(0.0f64..1.0, 12), patch in 2usize..6) {
        let field = SignatureField {
            features: Array2::zeros((12, 1)),
            grid_h: 3,
            grid_w: 4,
            patch_size: patch,
            stride: patch,
            image_h: 3 * patch,
            image_w: 4 * patch,
        };
        let map = upsample_cells(&field, &cells, Upsample::Average).unwrap();
        for ((y, x), v) in map.indexed_iter() {
            prop_assert_eq!(*v, cells[(y / patch) * 4 + x / patch]);
        }
    }
}

fn clustered_field(seed: u64) -> SignatureField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (6, 6);
    let features = Array2::from_shape_fn((gh * gw, 2), |(i, _)| {
        let shift = if i % gw < 2 { 3.0 } else { 0.0 };
        shift + rng.random_range(-0.5..0.5)
    });
    SignatureField {
        features,
        grid_h: gh,
        grid_w: gw,
        patch_size: 4,
        stride: 2,
        image_h: 14,
        image_w: 14,
    }
}
