//! Cross-module invariants: estimator agreement, claimed-rate decay,
//! distributional sanity of couplings and the Chapman-Kolmogorov check
//! across the whole model catalog.

use decay_core::lyapunov::LyapunovFunction;
use decay_core::measures::{ck_consistency, wasserstein_1d, EmpiricalMeasure, MeasureMeta};
use decay_core::mckean::{frozen_monotonicity, mv_derivative_decay, MVCoefficientSet};
use decay_core::models::ModelRegistry;
use decay_core::rng::path_rng;
use decay_core::sensitivity::{
    build_test_function, default_x_grid, envelope_check, estimate_dv_fd, estimate_dv_pathwise,
    DecayEnvelope, DerivOrder, Family, TestFunction,
};
use decay_core::simulate::{couple_paths, simulate_paths, InitialCondition, TimeGrid};
use decay_core::stats;
use rand::Rng;
use rand_distr::StandardNormal;

fn sprime2() -> Family {
    Family::SPrime { m: 2, c: 1.0 }
}

#[test]
fn pathwise_and_fd_first_derivatives_agree_across_catalog() {
    let registry = ModelRegistry::with_catalog();
    let n = 4000;
    let dt = 2e-3;
    for entry in registry.default_catalog() {
        let model = &entry.coefficients;
        if model.dim() != 1 {
            continue;
        }
        for phi_name in ["identity", "tanh", "square"] {
            let phi = build_test_function(phi_name, 1, sprime2()).unwrap();
            for &s in &[1.0, 2.0] {
                for &x in &[0.0, 1.0] {
                    let pw = estimate_dv_pathwise(
                        model,
                        &phi,
                        s,
                        &[x],
                        n,
                        17,
                        dt,
                        DerivOrder::First,
                    )
                    .unwrap();
                    let (fd, fd_se) = estimate_dv_fd(
                        model,
                        &phi,
                        s,
                        &[x],
                        n,
                        17,
                        dt,
                        1e-3,
                        DerivOrder::First,
                        0,
                    )
                    .unwrap();
                    let sigma = (fd_se * fd_se + pw.stderr[0] * pw.stderr[0]).sqrt();
                    let tol = 3.0 * sigma + 1e-3;
                    assert!(
                        (pw.value[0] - fd).abs() <= tol,
                        "{} / {phi_name} at (s = {s}, x = {x}): pathwise {} vs fd {fd} (tol {tol})",
                        entry.name,
                        pw.value[0]
                    );
                }
            }
        }
    }
}

#[test]
fn fitted_decay_beats_claimed_rate_across_catalog() {
    let registry = ModelRegistry::with_catalog();
    let phi = build_test_function("tanh", 1, sprime2()).unwrap();
    let times = [1.5, 2.0, 3.0, 4.0];
    let grid: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.0], vec![1.0]];
    for entry in registry.default_catalog() {
        let model = &entry.coefficients;
        let Some(claimed) = entry.claimed_m1 else { continue };
        if model.dim() != 1 {
            continue;
        }
        // The switching model's drift wall gives the tamed Euler map O(1)
        // single-step recoils whose linearization amplifies instead of
        // contracting at any practical dt; its late-time tangent estimates
        // are censored as noise-dominated, so the slope fit is undefined for
        // it. Its claimed constant is verified at drift level by
        // check_dissipativity instead.
        if model.flags.superlinear_drift {
            continue;
        }
        let env = DecayEnvelope::poly(1.0, 2.0, 2.0, claimed).unwrap();
        let report = envelope_check(
            model,
            &phi,
            &env,
            &grid,
            &times,
            DerivOrder::First,
            20_000,
            29,
            2e-3,
            0.1,
        )
        .unwrap();
        let slope = report.fitted_slope.expect("uncensored fit");
        let hw = report.slope_halfwidth.unwrap();
        assert!(
            slope <= -claimed + 3.0 * hw,
            "{}: slope {slope} vs claimed rate {claimed} (hw {hw})",
            entry.name
        );
    }
}

#[test]
fn sine_envelope_matches_locally_lipschitz_rate() {
    let registry = ModelRegistry::with_catalog();
    let entry = registry.build_default("sine").unwrap();
    let phi = build_test_function("tanh", 1, sprime2()).unwrap();
    let env = DecayEnvelope::poly(1.0, 2.0, 2.0, 1.0).unwrap();
    let report = envelope_check(
        &entry.coefficients,
        &phi,
        &env,
        &default_x_grid(1),
        &[1.5, 2.0, 3.0, 4.0],
        DerivOrder::First,
        20_000,
        31,
        2e-3,
        0.1,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    let slope = report.fitted_slope.unwrap();
    assert!(slope <= -1.0 + 0.1, "slope {slope}");
}

#[test]
fn second_derivative_of_quadratic_is_flat_in_x() {
    // d^2 V / dx^2 for phi = x^2 on the OU model equals 2 e^{-2s} at every x.
    let registry = ModelRegistry::with_catalog();
    let model = registry.build_default("ou").unwrap().coefficients;
    let phi = build_test_function("square", 1, sprime2()).unwrap();
    let dt = 1e-3;
    for &s in &[1.0, 2.0] {
        let expected = 2.0 * (-2.0 * s as f64).exp();
        let mut estimates = Vec::new();
        for &x in &[-1.0, 0.0, 1.0] {
            let est =
                estimate_dv_pathwise(&model, &phi, s, &[x], 2000, 41, dt, DerivOrder::Second)
                    .unwrap();
            let tol = (3.0 * est.stderr[0]).max(5e-3);
            assert!(
                (est.value[0] - expected).abs() <= tol,
                "(s = {s}, x = {x}): {} vs {expected}",
                est.value[0]
            );
            estimates.push((est.value[0], est.stderr[0]));
        }
        for w in estimates.windows(2) {
            let sigma = (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt();
            assert!(
                (w[0].0 - w[1].0).abs() <= 3.0 * sigma + 1e-9,
                "estimates differ across x: {estimates:?}"
            );
        }
    }
}

#[test]
fn coupled_legs_are_distributionally_plain_simulations() {
    let registry = ModelRegistry::with_catalog();
    let model = registry.build_default("sine").unwrap().coefficients;
    let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
    let n = 10_000;
    let (leg_x, leg_y) = couple_paths(&model, &grid, &[0.0], &[2.0], n, 51, &[1.0]).unwrap();
    let threshold = stats::ks_threshold_1pct(n, n);
    for (leg, start) in [(leg_x, 0.0), (leg_y, 2.0)] {
        let fresh = simulate_paths(
            &model,
            &grid,
            &InitialCondition::point(&[start]),
            n,
            52,
            &[1.0],
        )
        .unwrap();
        let ks = stats::ks_statistic(
            &leg.coordinate_column(0, 0),
            &fresh.coordinate_column(0, 0),
        );
        assert!(ks < threshold, "start {start}: ks {ks} vs {threshold}");
    }
}

#[test]
fn ck_consistency_holds_across_catalog() {
    let registry = ModelRegistry::with_catalog();
    for entry in registry.default_catalog() {
        let model = &entry.coefficients;
        for &tau in &[0.0, 0.5] {
            for &s in &[1.0, 2.0] {
                let r = ck_consistency(model, tau, s, &[1.0], 10_000, 61, 0.02).unwrap();
                assert!(
                    r.pass,
                    "{} at (tau = {tau}, s = {s}): ks {} vs {}",
                    entry.name, r.ks, r.threshold
                );
            }
        }
    }
}

#[test]
fn w1_self_distance_stability() {
    // Two independent n-sample standard normal clouds stay within 3/sqrt(n)
    // in W1 for 95% of 50 seeded repeats, up to the binomial two-sigma
    // allowance of the 50-repeat sample (0.95 - 2 sqrt(0.95 * 0.05 / 50),
    // i.e. at least 45 of 50).
    for &n in &[1000usize, 10_000] {
        let bound = 3.0 / (n as f64).sqrt();
        let mut passes = 0;
        for rep in 0..50u64 {
            let draw = |stream: u64| -> EmpiricalMeasure {
                let mut rng = path_rng(1000 + rep, stream, 0);
                let xs: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                EmpiricalMeasure::from_samples(xs, 1, MeasureMeta::default()).unwrap()
            };
            let a = draw(1);
            let b = draw(2);
            if wasserstein_1d(&a, &b, 1.0).unwrap() <= bound {
                passes += 1;
            }
        }
        assert!(passes >= 45, "n = {n}: only {passes}/50 under {bound}");
    }
}

#[test]
fn mv_derivative_decay_reduces_to_autonomous_case() {
    // No interaction: the frozen model is the rate-a OU, whose identity
    // derivative decays at exactly a.
    let a = 2.0;
    let mv = MVCoefficientSet::mean_field_linear(a, 0.0, 1.0, 1);
    let phi = build_test_function("identity", 1, sprime2()).unwrap();
    let env = DecayEnvelope::poly(1.0, 2.0, 2.0, a).unwrap();
    let report = mv_derivative_decay(
        &mv,
        &[vec![0.0], vec![1.0]],
        &[1.5, 2.0, 2.5, 3.0],
        &phi,
        DerivOrder::First,
        512,
        2000,
        71,
        4e-3,
        &env,
        0.1,
    )
    .unwrap();
    let slope = report.fitted_slope.expect("uncensored");
    let hw = report.slope_halfwidth.unwrap();
    assert!(
        (slope + a).abs() <= (3.0 * hw).max(0.05),
        "slope {slope} vs -{a} (hw {hw})"
    );
}

#[test]
fn mv_derivative_decay_constant_phi_is_all_zero() {
    let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 1.0, 1);
    let phi = TestFunction::new(
        "const",
        1,
        std::sync::Arc::new(|_x: &[f64]| 4.0),
        Some(std::sync::Arc::new(|_x: &[f64]| vec![0.0])),
        Some(std::sync::Arc::new(|_x: &[f64]| 0.0)),
        Family::Unrestricted,
        None,
    )
    .unwrap();
    let env = DecayEnvelope::poly(1.0, 2.0, 2.0, 1.5).unwrap();
    let report = mv_derivative_decay(
        &mv,
        &[vec![1.0]],
        &[1.5, 2.0, 2.5],
        &phi,
        DerivOrder::First,
        128,
        500,
        71,
        4e-3,
        &env,
        0.1,
    )
    .unwrap();
    assert!(report.pass);
    assert_eq!(report.n_censored, report.times.len());
    assert!(report.values.iter().all(|&v| v == 0.0));
}

#[test]
fn mv_derivative_decay_interacting_beats_mean_rate() {
    let (a, c) = (2.0, 0.5);
    let mv = MVCoefficientSet::mean_field_linear(a, c, 1.0, 1);
    let phi = build_test_function("tanh", 1, sprime2()).unwrap();
    let env = DecayEnvelope::poly(1.0, 2.0, 2.0, a - c).unwrap();
    let report = mv_derivative_decay(
        &mv,
        &[vec![0.0], vec![1.0]],
        &[1.5, 2.0, 2.5, 3.0],
        &phi,
        DerivOrder::First,
        512,
        4000,
        73,
        4e-3,
        &env,
        0.1,
    )
    .unwrap();
    let slope = report.fitted_slope.expect("uncensored");
    let hw = report.slope_halfwidth.unwrap();
    // The spec's bound: at least the mean-flow rate a - c.
    assert!(slope <= -(a - c) + 3.0 * hw, "slope {slope} (hw {hw})");
    // Oracle: the frozen drift's measured monotonicity constant, which is a.
    let m1 = frozen_monotonicity(&mv, &[1.0], 2.5, 256, 73, 4e-3).unwrap();
    assert!((m1 - a).abs() < 1e-9);
    assert!(
        (slope + m1).abs() <= (3.0 * hw).max(0.1),
        "slope {slope} vs oracle rate {m1}"
    );
}

#[test]
fn frozen_no_interaction_ensembles_match_reference_bitwise() {
    use decay_core::mckean::{freeze_law_flow, simulate_particles};
    use std::sync::Arc;
    let mv = MVCoefficientSet::mean_field_linear(1.5, 0.0, 1.0, 1);
    let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
    let flow = Arc::new(
        simulate_particles(&mv, &InitialCondition::point(&[0.7]), 64, &grid, 3).unwrap(),
    );
    let frozen = freeze_law_flow(&mv, &flow).unwrap();
    let reference = ModelRegistry::with_catalog()
        .build(
            "ou",
            &[("M1".to_string(), 1.5), ("sigma".to_string(), 1.0), ("dim".to_string(), 1.0)]
                .into_iter()
                .collect(),
        )
        .unwrap()
        .coefficients;
    let a = simulate_paths(&frozen, &grid, &InitialCondition::point(&[0.7]), 128, 9, &[0.5, 1.0])
        .unwrap();
    let b = simulate_paths(
        &reference,
        &grid,
        &InitialCondition::point(&[0.7]),
        128,
        9,
        &[0.5, 1.0],
    )
    .unwrap();
    assert_eq!(a.raw_states(), b.raw_states());
}

#[test]
fn dissipativity_matches_lyapunov_w_between_checkers() {
    // The quadratic-W dissipativity constant doubles the monotonicity one on
    // every 1-d catalog model (validated inside the crate too; this pins the
    // public API path).
    let registry = ModelRegistry::with_catalog();
    let w = LyapunovFunction::squared_norm(1);
    let entry = registry.build_default("sine").unwrap();
    let diss = decay_core::lyapunov::check_dissipativity(
        &entry.coefficients,
        &w,
        (0.0, 5.0),
        (-5.0, 5.0),
        10_000,
        3,
    )
    .unwrap();
    let mono = decay_core::lyapunov::check_monotonicity(
        &entry.coefficients,
        2,
        (0.0, 5.0),
        (-5.0, 5.0),
        10_000,
        3,
    )
    .unwrap();
    assert!((diss.m1_max - 2.0 * mono.m1_max).abs() < 1e-6);
}
