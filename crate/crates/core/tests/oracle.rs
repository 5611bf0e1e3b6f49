use cskn::featmap::FeatureMap;
use cskn::oracle::{embedding_error_report, exact_match_kernel};
use nalgebra::DMatrix;
use proptest::prelude::*;

// Independent transcription: walks pixels directly instead of going through
// sub-patch extraction.
fn triple_loop(a: &[f64], b: &[f64], side: usize, alpha: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    for z in 0..side * side {
        for zp in 0..side * side {
            let (x, y) = (a[z], b[zp]);
            if x == 0.0 || y == 0.0 {
                continue;
            }
            let dr = (z / side) as f64 - (zp / side) as f64;
            let dc = (z % side) as f64 - (zp % side) as f64;
            let feat = (x.signum() - y.signum()).powi(2);
            total += x.abs()
                * y.abs()
                * (-(dr * dr + dc * dc) / (2.0 * beta * beta)).exp()
                * (-feat / (2.0 * alpha * alpha)).exp();
        }
    }
    total
}

fn map(side: usize, values: Vec<f64>) -> FeatureMap {
    FeatureMap::new(side, side, 1, values).unwrap()
}

#[test]
fn matches_independent_triple_loop() {
    let a = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 3.0, 1.0, -2.0];
    let b = vec![1.0, 1.0, -0.5, 2.5, 0.0, 0.75, -1.0, 0.5, 2.0];
    let k = exact_match_kernel(&map(3, a.clone()), &map(3, b.clone()), 1, 1.0, 1.0).unwrap();
    let reference = triple_loop(&a, &b, 3, 1.0, 1.0);
    assert!((k - reference).abs() < 1e-12, "{k} vs {reference}");
}

fn tiny_map() -> impl Strategy<Value = FeatureMap> {
    (2usize..=5, 1usize..=3).prop_flat_map(|(side, ch)| {
        prop::collection::vec(-2.0f64..2.0, side * side * ch)
            .prop_map(move |v| FeatureMap::new(side, side, ch, v).unwrap())
    })
}

proptest! {
    #[test]
    fn kernel_is_symmetric(
        (a, b) in tiny_map().prop_flat_map(|a| {
            let (w, c) = (a.width(), a.channels());
            (Just(a), prop::collection::vec(-2.0f64..2.0, w * w * c)
                .prop_map(move |v| FeatureMap::new(w, w, c, v).unwrap()))
        }),
        alpha in 0.2f64..2.0,
        beta in 0.5f64..3.0,
    ) {
        prop_assert_eq!(
            exact_match_kernel(&a, &b, 1, alpha, beta).unwrap(),
            exact_match_kernel(&b, &a, 1, alpha, beta).unwrap()
        );
    }

    #[test]
    fn kernel_is_linear_in_intensity_scale(a in tiny_map(), k in 0.1f64..10.0) {
        let b = a.scaled(0.5).unwrap().values().iter().rev().copied().collect::<Vec<_>>();
        let b = FeatureMap::new(a.width(), a.height(), a.channels(), b).unwrap();
        let base = exact_match_kernel(&a, &b, 1, 0.7, 1.2).unwrap();
        let scaled = exact_match_kernel(&a.scaled(k).unwrap(), &b, 1, 0.7, 1.2).unwrap();
        prop_assert!((scaled - k * base).abs() <= 1e-9 * (k * base).abs().max(1e-12));
    }

    #[test]
    fn gram_is_positive_semidefinite(
        values in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4 * 4 * 2), 2..=6),
        patch in 1usize..=2,
    ) {
        let maps: Vec<FeatureMap> = values.into_iter().map(|v| FeatureMap::new(4, 4, 2, v).unwrap()).collect();
        let n = maps.len();
        let gram = DMatrix::from_fn(n, n, |i, j| exact_match_kernel(&maps[i], &maps[j], patch, 0.8, 1.0).unwrap());
        let min = gram.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-8 * gram.trace(), "min eigenvalue {}", min);
    }

    #[test]
    fn error_statistics_are_nonnegative(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
    ) {
        let (exact, approx): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = embedding_error_report(&exact, &approx).unwrap();
        prop_assert!(r.max_abs >= 0.0 && r.mean_abs >= 0.0 && r.relative_frobenius >= 0.0);
        prop_assert!(r.mean_abs <= r.max_abs + 1e-15);
    }
}
