//! Property tests for the distance implementations.

use decay_core::measures::{
    wasserstein_1d, wasserstein_assignment, EmpiricalMeasure, MeasureMeta,
};
use proptest::prelude::*;

fn meas(xs: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::from_samples(xs.to_vec(), 1, MeasureMeta::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_equals_sorted_formula_in_1d(
        a in prop::collection::vec(-1e3f64..1e3, 1..40),
        b_base in prop::collection::vec(-1e3f64..1e3, 1..40),
        p in 1u8..=3,
    ) {
        let n = a.len().min(b_base.len());
        let a = &a[..n];
        let b = &b_base[..n];
        let p = p as f64;
        let exact = wasserstein_1d(&meas(a), &meas(b), p).unwrap();
        let assigned = wasserstein_assignment(&meas(a), &meas(b), p).unwrap();
        prop_assert!((exact - assigned).abs() <= 1e-9 * (1.0 + exact));
    }

    #[test]
    fn wasserstein_symmetry_and_identity(
        a in prop::collection::vec(-50f64..50.0, 1..32),
        b_base in prop::collection::vec(-50f64..50.0, 1..32),
        p in 1u8..=2,
    ) {
        let n = a.len().min(b_base.len());
        let a = &a[..n];
        let b = &b_base[..n];
        let p = p as f64;
        let ab = wasserstein_1d(&meas(a), &meas(b), p).unwrap();
        let ba = wasserstein_1d(&meas(b), &meas(a), p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert_eq!(wasserstein_1d(&meas(a), &meas(a), p).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
    }
}

#[test]
fn triangle_inequality_on_sampled_triples() {
    use decay_core::rng::{path_rng, uniform};
    for trial in 0..100u64 {
        let mut rng = path_rng(0xABCD, 0, trial);
        let n = 1 + (uniform(&mut rng, 0.0, 24.0) as usize);
        let mut draw = || -> Vec<f64> { (0..n).map(|_| uniform(&mut rng, -10.0, 10.0)).collect() };
        let (a, b, c) = (draw(), draw(), draw());
        for p in [1.0, 2.0] {
            let ab = wasserstein_1d(&meas(&a), &meas(&b), p).unwrap();
            let bc = wasserstein_1d(&meas(&b), &meas(&c), p).unwrap();
            let ac = wasserstein_1d(&meas(&a), &meas(&c), p).unwrap();
            assert!(ac <= ab + bc + 1e-9, "p = {p}: {ac} > {ab} + {bc}");
        }
    }
}
