mod common;

use common::*;
use proptest::prelude::*;
use styleguide::numerics::Image;
use styleguide::style::{extract, style_distance, style_distance_grad, Distance, PyramidConfig};

#[test]
fn style_distance_gradients_match_central_differences() {
    for metric in [Distance::Mae, Distance::Mse] {
        for seed in 0..12 {
            let err = style_grad_error(seed, metric);
            assert!(err < 1e-4, "{metric:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn variance_gradients_match_central_differences() {
    for seed in 0..12 {
        let err = variance_grad_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn sign_test_reference_values() {
    assert_eq!(sign_test_p(0, 20), 1.0);
    assert!((sign_test_p(20, 20) - 2f64.powi(-20)).abs() < 1e-18);
    // 1 + 20 + 190 = 211 outcomes with at most two failures
    assert!((sign_test_p(18, 20) - 211.0 / 1_048_576.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // descending along the analytic gradient lowers the distance to first order
    #[test]
    fn gradient_predicts_first_order_change(
        pix in prop::collection::vec(-1.0f64..1.0, 8 * 8 * 3),
        seed in 0u64..1000,
        mse in any::<bool>(),
    ) {
        let metric = if mse { Distance::Mse } else { Distance::Mae };
        let pyr = PyramidConfig::new(3, 1e-8).unwrap();
        let w = [1.0, 1.0, 1.0];
        let x = Image::from_vec(noise_image(0, 0, 8, 8, 1.0).shape(), pix).unwrap();
        let y = extract(&noise_image(seed, 1, 8, 8, 0.7), &pyr, &w).unwrap();
        let g = style_distance_grad(&x, &y, &pyr, &w, metric).unwrap();
        let gn = g.norm();
        prop_assume!(gn > 1e-8);
        let h = 1e-6 / gn;
        let d0 = style_distance(&extract(&x, &pyr, &w).unwrap(), &y, metric).unwrap();
        let d1 = style_distance(&extract(&x.add_scaled(&g, -h).unwrap(), &pyr, &w).unwrap(), &y, metric).unwrap();
        let predicted = h * gn * gn;
        let actual = d0 - d1;
        prop_assert!(actual > 0.0);
        prop_assert!((actual - predicted).abs() <= 1e-3 * predicted + 1e-13,
            "actual {actual:e} predicted {predicted:e}");
    }
}
