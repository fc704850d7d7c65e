//! Monte Carlo estimators for V(s, x) = E[phi(X_s^x)] and its space
//! derivatives, test-function families with sampled certificates, decay-rate
//! fitting and the derivative-envelope check.

use crate::error::{DecayError, Result};
use crate::lyapunov::LyapunovFunction;
use crate::models::{C2Scalar, CoefficientSet};
use crate::rng::{path_rng, streams, uniform};
use crate::simulate::{
    simulate_bundle, simulate_paths_stream, simulate_with_tangent_stream, InitialCondition,
    PathEnsemble, TangentEnsemble, TangentOrder, TimeGrid,
};
use crate::stats::{self, LineFit};
use serde::Serialize;
use std::sync::Arc;

/// Test-function family certificate.
#[derive(Clone)]
pub enum Family {
    /// |phi(x) - phi(y)|^m <= W(x - y).
    SM { w: LyapunovFunction, m: u32 },
    /// |phi(x) - phi(y)| <= C (1 + |x|^{m/2} + |y|^{m/2}) |x - y|.
    SPrime { m: u32, c: f64 },
    Unrestricted,
}

impl Family {
    /// Expected envelope rate for a model with contraction constant m1:
    /// m1 / m for the Lyapunov-increment family, m1 for the locally
    /// Lipschitz one.
    pub fn theoretical_rate(&self, m1: f64) -> Option<f64> {
        match self {
            Family::SM { m, .. } => Some(m1 / *m as f64),
            Family::SPrime { .. } => Some(m1),
            Family::Unrestricted => None,
        }
    }

    pub fn convention(&self) -> String {
        match self {
            Family::SM { m, .. } => format!("S_m (m = {m}): rate M1/m"),
            Family::SPrime { m, .. } => format!("S'_m (m = {m}): rate M1"),
            Family::Unrestricted => "unrestricted".into(),
        }
    }
}

/// Evaluable test function with optional derivatives and a validated family
/// certificate.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    dim: usize,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    hess: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    pub family: Family,
    /// (C, exponent) certifying |phi(x)| <= C (1 + |x|^exponent).
    pub growth_bound: Option<(f64, f64)>,
}

const CERTIFICATE_PAIRS: usize = 10_000;
const CERTIFICATE_RANGE: (f64, f64) = (-5.0, 5.0);

impl TestFunction {
    /// Builds and validates the family certificate on a fixed sample of
    /// point pairs. Refusal is an error.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        grad: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
        hess: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
        family: Family,
        growth_bound: Option<(f64, f64)>,
    ) -> Result<Self> {
        let f = TestFunction { name: name.into(), dim, eval, grad, hess, family, growth_bound };
        f.validate_certificate()?;
        Ok(f)
    }

    fn validate_certificate(&self) -> Result<()> {
        let mut rng = path_rng(0x7E57_F0, streams::ASSUMPTION_SAMPLER, 0);
        let d = self.dim;
        for _ in 0..CERTIFICATE_PAIRS {
            let x: Vec<f64> =
                (0..d).map(|_| uniform(&mut rng, CERTIFICATE_RANGE.0, CERTIFICATE_RANGE.1)).collect();
            let y: Vec<f64> =
                (0..d).map(|_| uniform(&mut rng, CERTIFICATE_RANGE.0, CERTIFICATE_RANGE.1)).collect();
            let gap = (self.value(&x) - self.value(&y)).abs();
            match &self.family {
                Family::SM { w, m } => {
                    let delta: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                    let rhs = w.value(&delta);
                    if gap.powi(*m as i32) > rhs * (1.0 + 1e-9) + 1e-12 {
                        return Err(DecayError::CertificateRefused(format!(
                            "{}: |phi(x)-phi(y)|^{} = {} > W(x-y) = {} at x = {:?}, y = {:?}",
                            self.name,
                            m,
                            gap.powi(*m as i32),
                            rhs,
                            x,
                            y
                        )));
                    }
                }
                Family::SPrime { m, c } => {
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dist = x
                        .iter()
                        .zip(&y)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    let half_m = *m as f64 / 2.0;
                    let rhs = c * (1.0 + nx.powf(half_m) + ny.powf(half_m)) * dist;
                    if gap > rhs * (1.0 + 1e-9) + 1e-12 {
                        return Err(DecayError::CertificateRefused(format!(
                            "{}: |phi(x)-phi(y)| = {gap} > C(1+|x|^{half_m}+|y|^{half_m})|x-y| = {rhs} \
                             at x = {x:?}, y = {y:?}",
                            self.name
                        )));
                    }
                }
                Family::Unrestricted => {}
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.grad {
            Some(g) => Ok(g(x)),
            None => Err(DecayError::capability(format!(
                "test function '{}' has no gradient evaluator",
                self.name
            ))),
        }
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn has_hess(&self) -> bool {
        self.hess.is_some()
    }

    /// d = 1 second derivative.
    pub fn hess1(&self, x: &[f64]) -> Result<f64> {
        match &self.hess {
            Some(h) => Ok(h(x)),
            None => Err(DecayError::capability(format!(
                "test function '{}' has no hessian evaluator",
                self.name
            ))),
        }
    }
}

impl C2Scalar for TestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g(x))
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        if self.dim == 1 {
            self.hess.as_ref().map(|h| vec![h(x)])
        } else {
            None
        }
    }
}

/// Named test functions. `poly_local_lipschitz` reads its order from the
/// family certificate (m >= 2).
pub fn build_test_function(name: &str, dim: usize, family: Family) -> Result<TestFunction> {
    let d = dim;
    match name {
        "identity" => TestFunction::new(
            "identity",
            d,
            Arc::new(|x: &[f64]| x[0]),
            Some(Arc::new(move |_x: &[f64]| {
                let mut g = vec![0.0; d];
                g[0] = 1.0;
                g
            })),
            Some(Arc::new(|_x: &[f64]| 0.0)),
            family,
            Some((1.0, 1.0)),
        ),
        "square" => TestFunction::new(
            "square",
            d,
            Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
            Some(Arc::new(|x: &[f64]| x.iter().map(|v| 2.0 * v).collect())),
            Some(Arc::new(|_x: &[f64]| 2.0)),
            family,
            Some((1.0, 2.0)),
        ),
        "tanh" => TestFunction::new(
            "tanh",
            d,
            Arc::new(|x: &[f64]| x[0].tanh()),
            Some(Arc::new(move |x: &[f64]| {
                let mut g = vec![0.0; d];
                let c = x[0].cosh();
                g[0] = 1.0 / (c * c);
                g
            })),
            Some(Arc::new(|x: &[f64]| {
                let t = x[0].tanh();
                let c = x[0].cosh();
                -2.0 * t / (c * c)
            })),
            family,
            Some((1.0, 0.0)),
        ),
        "smooth_abs" => {
            // sqrt(|x|^2 + a^2) - a: 1-Lipschitz smoothing of |x|.
            const A: f64 = 0.05;
            TestFunction::new(
                "smooth_abs",
                d,
                Arc::new(|x: &[f64]| {
                    let n2: f64 = x.iter().map(|v| v * v).sum();
                    (n2 + A * A).sqrt() - A
                }),
                Some(Arc::new(|x: &[f64]| {
                    let n2: f64 = x.iter().map(|v| v * v).sum();
                    let r = (n2 + A * A).sqrt();
                    x.iter().map(|v| v / r).collect()
                })),
                Some(Arc::new(|x: &[f64]| {
                    let r2 = x[0] * x[0] + A * A;
                    A * A / (r2 * r2.sqrt())
                })),
                family,
                Some((1.0, 1.0)),
            )
        }
        "poly_local_lipschitz" => {
            let m = match &family {
                Family::SM { m, .. } | Family::SPrime { m, .. } => *m,
                Family::Unrestricted => 2,
            };
            if d != 1 {
                return Err(DecayError::capability(
                    "poly_local_lipschitz is implemented for d = 1",
                ));
            }
            let half_m = m as f64 / 2.0;
            TestFunction::new(
                format!("poly_local_lipschitz({m})"),
                1,
                Arc::new(move |x: &[f64]| x[0] * x[0].abs().powf(half_m)),
                Some(Arc::new(move |x: &[f64]| {
                    vec![(half_m + 1.0) * x[0].abs().powf(half_m)]
                })),
                Some(Arc::new(move |x: &[f64]| {
                    (half_m + 1.0) * half_m * x[0].abs().powf(half_m - 1.0) * x[0].signum()
                })),
                family,
                Some((1.0, half_m + 1.0)),
            )
        }
        other => Err(DecayError::invalid(format!(
            "unknown test function '{other}' \
             (known: identity, square, tanh, smooth_abs, poly_local_lipschitz)"
        ))),
    }
}

/// Monte Carlo estimate of V(s, x) = E[phi(X_s^x)] with standard error.
/// s = 0 returns (phi(x), 0) without simulation.
pub fn estimate_v(
    model: &CoefficientSet,
    phi: &TestFunction,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<(f64, f64)> {
    if s < 0.0 {
        return Err(DecayError::invalid(format!("s must be >= 0, got {s}")));
    }
    if s == 0.0 {
        return Ok((phi.value(x), 0.0));
    }
    let grid = TimeGrid::fit(0.0, s, dt)?;
    let ens = simulate_paths_stream(
        model,
        &grid,
        &InitialCondition::point(x),
        n_paths,
        seed,
        streams::MAIN,
        &[s],
    )?;
    let vals = ens.map_column(0, |state| phi.value(state));
    Ok(stats::mean_stderr(&vals))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivOrder {
    First,
    Second,
}

impl DerivOrder {
    pub fn from_u8(order: u8) -> Result<Self> {
        match order {
            1 => Ok(DerivOrder::First),
            2 => Ok(DerivOrder::Second),
            other => Err(DecayError::invalid(format!("derivative order must be 1 or 2, got {other}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            DerivOrder::First => 1,
            DerivOrder::Second => 2,
        }
    }
}

/// Derivative estimate: a d-vector for order 1, a single entry for order 2.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
}

fn pathwise_from_ensembles(
    phi: &TestFunction,
    paths: &PathEnsemble,
    tangent: &TangentEnsemble,
    record: usize,
    order: DerivOrder,
) -> Result<DerivativeEstimate> {
    let d = paths.dim();
    let n = paths.n_paths();
    match order {
        DerivOrder::First => {
            let mut value = Vec::with_capacity(d);
            let mut stderr = Vec::with_capacity(d);
            let grads: Vec<Vec<f64>> =
                (0..n).map(|p| phi.grad(paths.state(p, record))).collect::<Result<_>>()?;
            for col in 0..d {
                let vals: Vec<f64> = (0..n)
                    .map(|p| {
                        let j = tangent.first(p, record);
                        let g = &grads[p];
                        (0..d).map(|i| g[i] * j[i * d + col]).sum()
                    })
                    .collect();
                let (m, se) = stats::mean_stderr(&vals);
                value.push(m);
                stderr.push(se);
            }
            Ok(DerivativeEstimate { value, stderr })
        }
        DerivOrder::Second => {
            let vals: Vec<f64> = (0..n)
                .map(|p| {
                    let state = paths.state(p, record);
                    let j = tangent.first(p, record)[0];
                    let k = tangent.second(p, record).expect("second variation recorded");
                    Ok(phi.hess1(state)? * j * j + phi.grad(state)?[0] * k)
                })
                .collect::<Result<_>>()?;
            let (m, se) = stats::mean_stderr(&vals);
            Ok(DerivativeEstimate { value: vec![m], stderr: vec![se] })
        }
    }
}

/// Magnitude cell for envelope checks: sup-norm of the derivative estimate
/// over coordinates, with the stderr of the binding coordinate.
pub(crate) fn pathwise_cell(
    phi: &TestFunction,
    paths: &PathEnsemble,
    tangent: &TangentEnsemble,
    record: usize,
    order: DerivOrder,
) -> Result<(f64, f64)> {
    let est = pathwise_from_ensembles(phi, paths, tangent, record, order)?;
    let (mut v, mut se) = (f64::NEG_INFINITY, 0.0);
    for (val, s) in est.value.iter().zip(&est.stderr) {
        if val.abs() > v {
            v = val.abs();
            se = *s;
        }
    }
    Ok((v, se))
}

/// Pathwise (tangent-process) derivative estimator: order 1 returns
/// E[grad phi(X_s)^T J_s] coordinate-wise; order 2 (d = 1) returns
/// E[phi''(X_s) J_s^2 + phi'(X_s) K_s].
#[allow(clippy::too_many_arguments)]
pub fn estimate_dv_pathwise(
    model: &CoefficientSet,
    phi: &TestFunction,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    order: DerivOrder,
) -> Result<DerivativeEstimate> {
    if s <= 0.0 {
        return Err(DecayError::invalid(format!("s must be > 0, got {s}")));
    }
    if order == DerivOrder::Second && model.dim() != 1 {
        return Err(DecayError::capability("order-2 pathwise estimator is d = 1 only"));
    }
    if !phi.has_grad() || (order == DerivOrder::Second && !phi.has_hess()) {
        return Err(DecayError::capability(format!(
            "test function '{}' lacks the derivatives required for order {}",
            phi.name,
            order.as_u8()
        )));
    }
    let grid = TimeGrid::fit(0.0, s, dt)?;
    let tangent_order = match order {
        DerivOrder::First => TangentOrder::First,
        DerivOrder::Second => TangentOrder::Second,
    };
    let (paths, tangent) = simulate_with_tangent_stream(
        model,
        &grid,
        x,
        n_paths,
        seed,
        streams::MAIN,
        &[s],
        tangent_order,
    )?;
    pathwise_from_ensembles(phi, &paths, &tangent, 0, order)
}

/// Default finite-difference step per the estimator design: 1e-3-scaled for
/// order 1 and 5e-3-scaled for order 2, relative to |x_dir|.
pub fn default_fd_step(order: DerivOrder, x: &[f64], direction: usize) -> f64 {
    let scale = x.get(direction).map_or(0.0, |v| v.abs());
    match order {
        DerivOrder::First => (1e-3 * scale).max(1e-3),
        DerivOrder::Second => (5e-3 * scale).max(5e-3),
    }
}

#[allow(clippy::too_many_arguments)]
fn fd_core(
    model: &CoefficientSet,
    phi: &TestFunction,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    h: f64,
    order: DerivOrder,
    direction: usize,
    common_noise: bool,
) -> Result<(f64, f64)> {
    if h <= 0.0 {
        return Err(DecayError::invalid(format!("FD step must be positive, got {h}")));
    }
    if direction >= model.dim() {
        return Err(DecayError::invalid(format!(
            "direction {direction} out of range for dimension {}",
            model.dim()
        )));
    }
    if s < 0.0 {
        return Err(DecayError::invalid(format!("s must be >= 0, got {s}")));
    }
    let mut x_plus = x.to_vec();
    let mut x_minus = x.to_vec();
    x_plus[direction] += h;
    x_minus[direction] -= h;
    if s == 0.0 {
        // V(0, .) = phi; no simulation.
        let v = match order {
            DerivOrder::First => (phi.value(&x_plus) - phi.value(&x_minus)) / (2.0 * h),
            DerivOrder::Second => {
                (phi.value(&x_plus) - 2.0 * phi.value(x) + phi.value(&x_minus)) / (h * h)
            }
        };
        return Ok((v, 0.0));
    }
    let grid = TimeGrid::fit(0.0, s, dt)?;
    if common_noise {
        let inits: Vec<Vec<f64>> = match order {
            DerivOrder::First => vec![x_plus, x_minus],
            DerivOrder::Second => vec![x_plus, x.to_vec(), x_minus],
        };
        let ens = simulate_bundle(model, &grid, &inits, n_paths, seed, streams::MAIN, &[s])?;
        let vals: Vec<f64> = (0..n_paths)
            .map(|p| match order {
                DerivOrder::First => {
                    (phi.value(ens[0].state(p, 0)) - phi.value(ens[1].state(p, 0))) / (2.0 * h)
                }
                DerivOrder::Second => {
                    (phi.value(ens[0].state(p, 0)) - 2.0 * phi.value(ens[1].state(p, 0))
                        + phi.value(ens[2].state(p, 0)))
                        / (h * h)
                }
            })
            .collect();
        Ok(stats::mean_stderr(&vals))
    } else {
        let run = |x0: &[f64], stream: u64| -> Result<(f64, f64)> {
            let ens = simulate_paths_stream(
                model,
                &grid,
                &InitialCondition::point(x0),
                n_paths,
                seed,
                stream,
                &[s],
            )?;
            Ok(stats::mean_stderr(&ens.map_column(0, |st| phi.value(st))))
        };
        match order {
            DerivOrder::First => {
                let (vp, sp) = run(&x_plus, streams::FD_INDEPENDENT_A)?;
                let (vm, sm) = run(&x_minus, streams::FD_INDEPENDENT_B)?;
                Ok(((vp - vm) / (2.0 * h), (sp * sp + sm * sm).sqrt() / (2.0 * h)))
            }
            DerivOrder::Second => {
                let (vp, sp) = run(&x_plus, streams::FD_INDEPENDENT_A)?;
                let (v0, s0) = run(x, streams::MAIN)?;
                let (vm, sm) = run(&x_minus, streams::FD_INDEPENDENT_B)?;
                Ok((
                    (vp - 2.0 * v0 + vm) / (h * h),
                    (sp * sp + 4.0 * s0 * s0 + sm * sm).sqrt() / (h * h),
                ))
            }
        }
    }
}

/// Central finite difference of V in one coordinate direction, with all
/// evaluations driven by common Brownian increments per path index.
#[allow(clippy::too_many_arguments)]
pub fn estimate_dv_fd(
    model: &CoefficientSet,
    phi: &TestFunction,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    h: f64,
    order: DerivOrder,
    direction: usize,
) -> Result<(f64, f64)> {
    fd_core(model, phi, s, x, n_paths, seed, dt, h, order, direction, true)
}

/// Independent-noise variant of [`estimate_dv_fd`]; a diagnostic baseline for
/// the common-noise variance reduction.
#[allow(clippy::too_many_arguments)]
pub fn estimate_dv_fd_independent(
    model: &CoefficientSet,
    phi: &TestFunction,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    h: f64,
    order: DerivOrder,
    direction: usize,
) -> Result<(f64, f64)> {
    fd_core(model, phi, s, x, n_paths, seed, dt, h, order, direction, false)
}

/// Weighted least squares of log(values) on times. Weights are
/// 1/(stderr/value)^2; all-zero stderrs mean equal weights. Values must be
/// positive (floor them at the noise level first).
pub fn fit_decay_rate(times: &[f64], values: &[f64], stderrs: &[f64]) -> Result<LineFit> {
    let n = times.len();
    if n < 3 || values.len() != n || stderrs.len() != n {
        return Err(DecayError::invalid(format!(
            "decay fit needs >= 3 matching points, got {n} / {} / {}",
            values.len(),
            stderrs.len()
        )));
    }
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(DecayError::invalid(
            "decay fit needs positive values; floor them at the stderr level first",
        ));
    }
    let logv: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let rel: Vec<f64> = stderrs.iter().zip(values).map(|(&s, &v)| s / v).collect();
    if rel.iter().all(|&r| r == 0.0) {
        stats::ols_line_fit(times, &logv)
    } else {
        let w: Vec<f64> = rel.iter().map(|&r| 1.0 / r.max(1e-12).powi(2)).collect();
        stats::wls_line_fit(times, &logv, &w)
    }
}

/// Envelope shape for |d^n V| <= C h(x) G(s).
#[derive(Debug, Clone, Copy, Serialize)]
pub enum EnvelopeForm {
    /// h(x) = C (1 + |x|^{p/m}).
    Poly { p: f64, m: f64 },
    /// h(x) = C e^{c |x|^2}.
    Gauss { c: f64 },
}

/// Decay envelope h(x) G(s) with G(s) = e^{-rate s}.
#[derive(Debug, Clone, Serialize)]
pub struct DecayEnvelope {
    pub form: EnvelopeForm,
    pub c_const: f64,
    pub rate: f64,
}

impl DecayEnvelope {
    pub fn poly(c_const: f64, p: f64, m: f64, rate: f64) -> Result<Self> {
        if !(c_const > 0.0) || !(p > 0.0) || !(m > 0.0) {
            return Err(DecayError::invalid("poly envelope needs positive C, p, m"));
        }
        Ok(DecayEnvelope { form: EnvelopeForm::Poly { p, m }, c_const, rate })
    }

    pub fn gauss(c_const: f64, c: f64, rate: f64) -> Result<Self> {
        if !(c_const > 0.0) || !(c > 0.0) {
            return Err(DecayError::invalid("gauss envelope needs positive C, c"));
        }
        Ok(DecayEnvelope { form: EnvelopeForm::Gauss { c }, c_const, rate })
    }

    pub fn h(&self, x: &[f64]) -> f64 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self.form {
            EnvelopeForm::Poly { p, m } => self.c_const * (1.0 + norm.powf(p / m)),
            EnvelopeForm::Gauss { c } => self.c_const * (c * norm * norm).exp(),
        }
    }

    pub fn g(&self, s: f64) -> f64 {
        (-self.rate * s).exp()
    }
}

/// Result of an envelope check: r(s) = max over the x grid of
/// |d^n V(s, x)| / h(x), with censoring, the fitted log-slope and the
/// two-part verdict.
#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    /// r(s) per time.
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Noise-censored points (value <= 2 stderr) excluded from the fit.
    pub censored: Vec<bool>,
    pub fitted_slope: Option<f64>,
    pub slope_halfwidth: Option<f64>,
    pub intercept: Option<f64>,
    pub theoretical_rate: Option<f64>,
    pub rate_convention: String,
    /// Anchor constant C^ = r(s1) / G(s1) at the first uncensored time.
    pub anchor_constant: Option<f64>,
    pub tolerance: f64,
    pub order: u8,
    pub n_censored: usize,
    pub pass: bool,
}

impl DecayReport {
    /// CSV body: `s,r,stderr,censored` rows, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,r,stderr,censored\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times[i],
                self.values[i],
                self.stderrs[i],
                u8::from(self.censored[i])
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a [`DecayReport`] from per-(s, x) derivative magnitudes. Shared by
/// the plain and the frozen-law (McKean) envelope checks.
pub(crate) fn report_from_cells(
    times: &[f64],
    // cells[si][xi] = (|d^n V|, stderr)
    cells: &[Vec<(f64, f64)>],
    h_values: &[f64],
    envelope: &DecayEnvelope,
    convention: String,
    order: u8,
    tolerance: f64,
) -> Result<DecayReport> {
    let mut values = Vec::with_capacity(times.len());
    let mut stderrs = Vec::with_capacity(times.len());
    let mut censored = Vec::with_capacity(times.len());
    for row in cells {
        let (mut best, mut best_se) = (f64::NEG_INFINITY, 0.0);
        for (xi, &(v, se)) in row.iter().enumerate() {
            let scaled = v / h_values[xi];
            if scaled > best {
                best = scaled;
                best_se = se / h_values[xi];
            }
        }
        values.push(best);
        stderrs.push(best_se);
        censored.push(best <= 2.0 * best_se);
    }

    let uncensored: Vec<usize> = (0..times.len()).filter(|&i| !censored[i]).collect();
    let fit = if uncensored.len() >= 3 {
        let t: Vec<f64> = uncensored.iter().map(|&i| times[i]).collect();
        let v: Vec<f64> = uncensored.iter().map(|&i| values[i]).collect();
        let se: Vec<f64> = uncensored.iter().map(|&i| stderrs[i]).collect();
        Some(fit_decay_rate(&t, &v, &se)?)
    } else {
        None
    };

    let anchor = uncensored
        .first()
        .map(|&i| values[i] / envelope.g(times[i]));
    let slope_ok = match &fit {
        Some(f) => f.slope <= -envelope.rate + tolerance,
        None => true,
    };
    let bound_ok = match anchor {
        Some(c_hat) => uncensored
            .iter()
            .all(|&i| values[i] <= c_hat * envelope.g(times[i]) * (1.0 + tolerance) + 1e-15),
        None => true,
    };
    let n_censored = censored.iter().filter(|&&c| c).count();
    Ok(DecayReport {
        times: times.to_vec(),
        values,
        stderrs,
        censored,
        fitted_slope: fit.as_ref().map(|f| f.slope),
        slope_halfwidth: fit.as_ref().map(|f| f.slope_halfwidth),
        intercept: fit.as_ref().map(|f| f.intercept),
        theoretical_rate: Some(envelope.rate),
        rate_convention: convention,
        anchor_constant: anchor,
        tolerance,
        order,
        n_censored,
        pass: slope_ok && bound_ok,
    })
}

/// Checks |d^n V(s, x)| <= C^ h(x) G(s) over a time list and x grid, fitting
/// the decay rate of r(s) = max_x |d^n V| / h(x). Pass requires the fitted
/// slope to reach -rate + tolerance and every r(s) to stay under the anchored
/// envelope.
#[allow(clippy::too_many_arguments)]
pub fn envelope_check(
    model: &CoefficientSet,
    phi: &TestFunction,
    envelope: &DecayEnvelope,
    x_grid: &[Vec<f64>],
    times: &[f64],
    order: DerivOrder,
    n_paths: usize,
    seed: u64,
    dt: f64,
    tolerance: f64,
) -> Result<DecayReport> {
    validate_envelope_inputs(x_grid, times)?;
    let tangent_order = match order {
        DerivOrder::First => TangentOrder::First,
        DerivOrder::Second => TangentOrder::Second,
    };
    let horizon = times.last().copied().unwrap();
    let grid = TimeGrid::fit(0.0, horizon, dt)?;
    // One simulation per grid point covering all record times.
    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(x_grid.len()); times.len()];
    for x in x_grid {
        let (paths, tangent) = simulate_with_tangent_stream(
            model,
            &grid,
            x,
            n_paths,
            seed,
            streams::MAIN,
            times,
            tangent_order,
        )?;
        for (si, _) in times.iter().enumerate() {
            cells[si].push(pathwise_cell(phi, &paths, &tangent, si, order)?);
        }
    }
    let h_values: Vec<f64> = x_grid.iter().map(|x| envelope.h(x)).collect();
    report_from_cells(
        times,
        &cells,
        &h_values,
        envelope,
        phi.family.convention(),
        order.as_u8(),
        tolerance,
    )
}

pub(crate) fn validate_envelope_inputs(x_grid: &[Vec<f64>], times: &[f64]) -> Result<()> {
    if x_grid.is_empty() {
        return Err(DecayError::invalid("x grid must not be empty"));
    }
    if times.len() < 2 {
        return Err(DecayError::invalid("envelope check needs at least two times"));
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(DecayError::invalid("times must be strictly increasing"));
        }
    }
    if times[0] <= 1.0 {
        return Err(DecayError::invalid(
            "envelope times must lie in (1, inf); the estimates start after unit time",
        ));
    }
    Ok(())
}

/// Default 9-point x grid, uniform on [-2, 2] coordinate-wise (d <= 2).
pub fn default_x_grid(dim: usize) -> Vec<Vec<f64>> {
    assert!(dim >= 1 && dim <= 2, "default grid covers d <= 2");
    let line: Vec<f64> = (0..9).map(|i| -2.0 + 4.0 * i as f64 / 8.0).collect();
    if dim == 1 {
        line.into_iter().map(|v| vec![v]).collect()
    } else {
        // 3 x 3 in d = 2.
        let coarse = [-2.0, 0.0, 2.0];
        let mut grid = Vec::new();
        for &a in &coarse {
            for &b in &coarse {
                grid.push(vec![a, b]);
            }
        }
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ou_model;

    fn identity_sprime() -> TestFunction {
        build_test_function("identity", 1, Family::SPrime { m: 2, c: 1.0 }).unwrap()
    }

    #[test]
    fn certificates_accept_and_refuse() {
        // identity against S_2 with W = |x|^2: equality case, accepted.
        let w = LyapunovFunction::squared_norm(1);
        assert!(build_test_function("identity", 1, Family::SM { w, m: 2 }).is_ok());
        // tanh is 1-Lipschitz: S'_2 with C = 1 accepted.
        assert!(build_test_function("tanh", 1, Family::SPrime { m: 2, c: 1.0 }).is_ok());
        // square: |x^2 - y^2| <= (1 + |x| + |y|) |x - y| accepted with C = 1,
        // refused with C = 0.1.
        assert!(build_test_function("square", 1, Family::SPrime { m: 2, c: 1.0 }).is_ok());
        let refused = build_test_function("square", 1, Family::SPrime { m: 2, c: 0.1 });
        assert!(matches!(refused, Err(DecayError::CertificateRefused(_))));
    }

    #[test]
    fn estimate_v_shortcuts() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = build_test_function("square", 1, Family::SPrime { m: 2, c: 1.0 }).unwrap();
        let (v, se) = estimate_v(&model, &phi, 0.0, &[3.0], 10, 1, 1e-2).unwrap();
        assert_eq!((v, se), (9.0, 0.0));
    }

    #[test]
    fn estimate_v_constant_integrand() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = TestFunction::new(
            "const5",
            1,
            Arc::new(|_x: &[f64]| 5.0),
            Some(Arc::new(|_x: &[f64]| vec![0.0])),
            Some(Arc::new(|_x: &[f64]| 0.0)),
            Family::Unrestricted,
            Some((5.0, 0.0)),
        )
        .unwrap();
        let (v, se) = estimate_v(&model, &phi, 1.0, &[2.0], 500, 1, 1e-2).unwrap();
        assert_eq!((v, se), (5.0, 0.0));
    }

    #[test]
    fn estimate_v_matches_ou_mean() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let (v, se) = estimate_v(&model, &phi, 1.0, &[2.0], 100_000, 5, 1e-3).unwrap();
        let expected = 2.0 * (-1.0f64).exp();
        assert!((v - expected).abs() <= 3.0 * se + 2e-3, "v = {v}, se = {se}");
    }

    #[test]
    fn pathwise_constant_phi_is_exactly_zero() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = TestFunction::new(
            "const",
            1,
            Arc::new(|_x: &[f64]| 1.0),
            Some(Arc::new(|_x: &[f64]| vec![0.0])),
            Some(Arc::new(|_x: &[f64]| 0.0)),
            Family::Unrestricted,
            None,
        )
        .unwrap();
        let est =
            estimate_dv_pathwise(&model, &phi, 1.0, &[0.5], 200, 3, 1e-2, DerivOrder::First)
                .unwrap();
        assert_eq!(est.value[0], 0.0);
        assert_eq!(est.stderr[0], 0.0);
    }

    #[test]
    fn pathwise_ou_identity_matches_exponential() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let est =
            estimate_dv_pathwise(&model, &phi, 1.0, &[2.0], 1000, 3, 1e-3, DerivOrder::First)
                .unwrap();
        let expected = (-1.0f64).exp();
        let tol = (3.0 * est.stderr[0]).max(5e-3);
        assert!((est.value[0] - expected).abs() <= tol, "{est:?}");
    }

    #[test]
    fn pathwise_ou_square_first_and_second_order() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = build_test_function("square", 1, Family::SPrime { m: 2, c: 1.0 }).unwrap();
        let first =
            estimate_dv_pathwise(&model, &phi, 1.0, &[1.0], 100_000, 3, 1e-3, DerivOrder::First)
                .unwrap();
        let expected = 2.0 * (-2.0f64).exp();
        let tol = (3.0 * first.stderr[0]).max(5e-3);
        assert!((first.value[0] - expected).abs() <= tol, "{first:?}");
        let second =
            estimate_dv_pathwise(&model, &phi, 1.0, &[1.0], 2000, 3, 1e-3, DerivOrder::Second)
                .unwrap();
        let tol = (3.0 * second.stderr[0]).max(5e-3);
        assert!((second.value[0] - expected).abs() <= tol, "{second:?}");
    }

    #[test]
    fn fd_linear_deterministic_is_exact() {
        // sigma = 0, linear drift and phi: no truncation error.
        let model = ou_model(1.0, 0.0, 1);
        let phi = identity_sprime();
        let fd = estimate_dv_fd(&model, &phi, 1.0, &[1.0], 50, 3, 1e-3, 1e-3, DerivOrder::First, 0)
            .unwrap();
        let pw = estimate_dv_pathwise(&model, &phi, 1.0, &[1.0], 50, 3, 1e-3, DerivOrder::First)
            .unwrap();
        assert!((fd.0 - pw.value[0]).abs() < 1e-10, "{} vs {}", fd.0, pw.value[0]);
    }

    #[test]
    fn fd_and_pathwise_agree_on_ou() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let fd = estimate_dv_fd(&model, &phi, 1.0, &[2.0], 4000, 9, 1e-3, 1e-3, DerivOrder::First, 0)
            .unwrap();
        let pw = estimate_dv_pathwise(&model, &phi, 1.0, &[2.0], 4000, 9, 1e-3, DerivOrder::First)
            .unwrap();
        let sigma = (fd.1 * fd.1 + pw.stderr[0] * pw.stderr[0]).sqrt();
        assert!((fd.0 - pw.value[0]).abs() <= 3.0 * sigma + 1e-4);
    }

    #[test]
    fn fd_smooth_abs_matches_gaussian_oracle() {
        // d/dx E|X_s^x| for the OU process: e^{-s} (2 Phi(x e^{-s} / sd) - 1),
        // sd^2 = (1 - e^{-2s}) / 2. Evaluated with the normal CDF.
        use statrs::distribution::{ContinuousCDF, Normal};
        let model = ou_model(1.0, 1.0, 1);
        let phi = build_test_function("smooth_abs", 1, Family::SPrime { m: 2, c: 1.0 }).unwrap();
        let (s, x) = (1.0, 2.0);
        let (fd, se) =
            estimate_dv_fd(&model, &phi, s, &[x], 10_000, 17, 1e-3, 1e-3, DerivOrder::First, 0)
                .unwrap();
        let sd = ((1.0 - (-2.0 * s as f64).exp()) / 2.0).sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let oracle = (-s as f64).exp() * (2.0 * normal.cdf(x * (-s as f64).exp() / sd) - 1.0);
        assert!(
            (fd - oracle).abs() <= 3.0 * se + 2e-3,
            "fd = {fd}, oracle = {oracle}, se = {se}"
        );
    }

    #[test]
    fn decay_fit_exact_logline() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let values: Vec<f64> = times.iter().map(|&t| (-t as f64).exp()).collect();
        let fit = fit_decay_rate(&times, &values, &[0.0; 4]).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
    }

    #[test]
    fn decay_fit_flat_values() {
        let times = [1.0, 2.0, 3.0];
        let values = [0.7, 0.7, 0.7];
        let fit = fit_decay_rate(&times, &values, &[0.0; 3]).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn decay_fit_scaled_line_with_weights() {
        let times: Vec<f64> = (1..=5).map(|i| i as f64).collect();
        let values: Vec<f64> = times.iter().map(|&t| 2.0 * (-0.5 * t as f64).exp()).collect();
        let stderrs: Vec<f64> = values.iter().map(|v| 0.01 * v).collect();
        let fit = fit_decay_rate(&times, &values, &stderrs).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-10);
        assert!((fit.intercept - 2.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn decay_fit_rejects_nonpositive_values() {
        let r = fit_decay_rate(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.5], &[0.0; 3]);
        assert!(matches!(r, Err(DecayError::InvalidArgument(_))));
    }

    #[test]
    fn envelope_ou_identity_passes_with_unit_slope() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let env = DecayEnvelope::poly(1.0, 2.0, 2.0, 1.0).unwrap();
        let grid = default_x_grid(1);
        let report = envelope_check(
            &model,
            &phi,
            &env,
            &grid,
            &[1.5, 2.0, 3.0, 4.0],
            DerivOrder::First,
            2000,
            5,
            1e-2,
            0.1,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        let slope = report.fitted_slope.unwrap();
        assert!((-1.15..=-0.85).contains(&slope), "slope {slope}");
    }

    #[test]
    fn envelope_constant_phi_all_censored_passes() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = TestFunction::new(
            "const",
            1,
            Arc::new(|_x: &[f64]| 2.0),
            Some(Arc::new(|_x: &[f64]| vec![0.0])),
            Some(Arc::new(|_x: &[f64]| 0.0)),
            Family::Unrestricted,
            None,
        )
        .unwrap();
        let env = DecayEnvelope::poly(1.0, 2.0, 2.0, 1.0).unwrap();
        let report = envelope_check(
            &model,
            &phi,
            &env,
            &default_x_grid(1),
            &[1.5, 2.0, 3.0],
            DerivOrder::First,
            200,
            5,
            1e-2,
            0.1,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.n_censored, 3);
        assert!(report.fitted_slope.is_none());
    }

    #[test]
    fn envelope_rejects_times_at_or_below_one() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let env = DecayEnvelope::poly(1.0, 2.0, 2.0, 1.0).unwrap();
        let r = envelope_check(
            &model,
            &phi,
            &env,
            &default_x_grid(1),
            &[0.5, 2.0],
            DerivOrder::First,
            100,
            5,
            1e-2,
            0.1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn variance_reduction_common_vs_independent() {
        let model = ou_model(1.0, 1.0, 1);
        let phi = identity_sprime();
        let common =
            estimate_dv_fd(&model, &phi, 1.0, &[1.0], 10_000, 7, 1e-2, 1e-3, DerivOrder::First, 0)
                .unwrap();
        let indep = estimate_dv_fd_independent(
            &model,
            &phi,
            1.0,
            &[1.0],
            10_000,
            7,
            1e-2,
            1e-3,
            DerivOrder::First,
            0,
        )
        .unwrap();
        assert!(
            common.1 <= indep.1,
            "common-noise stderr {} should not exceed independent {}",
            common.1,
            indep.1
        );
    }
}
