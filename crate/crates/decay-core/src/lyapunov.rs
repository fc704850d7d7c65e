//! Lyapunov functions and runtime checkers for the structural assumptions:
//! two-point dissipativity, monotonicity, the one-point drift condition, and
//! the empirical coupling-contraction and moment-decay inequalities.
//!
//! The checkers sample; they can refute an assumption on the sampled region
//! but never prove it globally. Reports carry the sampled region.

use crate::error::{DecayError, Result};
use crate::models::{C2Scalar, CoefficientSet};
use crate::rng::{path_rng, streams, uniform};
use crate::simulate::{couple_paths, simulate_paths, InitialCondition, TimeGrid};
use crate::stats;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Evaluable Lyapunov function with derivatives and claimed constants.
#[derive(Clone)]
pub struct LyapunovFunction {
    pub name: String,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    hess: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    /// Polynomial order certificate: W is in B_p.
    pub p: u32,
    /// Lower-bound constant: c_w |x|^p <= W(x), when claimed.
    pub c_w: Option<f64>,
    /// Gradient-growth constant: |grad W| <= m_w (1 + W).
    pub m_w: f64,
    /// W maps into [1, inf); required by the drift-condition usage.
    pub floor_one: bool,
}

impl LyapunovFunction {
    pub fn new(
        name: impl Into<String>,
        eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
        hess: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
        p: u32,
        c_w: Option<f64>,
        m_w: f64,
        floor_one: bool,
    ) -> Self {
        LyapunovFunction { name: name.into(), eval, grad, hess, p, c_w, m_w, floor_one }
    }

    /// W(x) = |x|^2.
    pub fn squared_norm(_dim: usize) -> Self {
        LyapunovFunction {
            name: "|x|^2".into(),
            eval: Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
            grad: Arc::new(|x: &[f64]| x.iter().map(|v| 2.0 * v).collect()),
            hess: Arc::new(move |x: &[f64]| {
                let d = x.len();
                let mut h = vec![0.0; d * d];
                for i in 0..d {
                    h[i * d + i] = 2.0;
                }
                h
            }),
            p: 2,
            c_w: Some(1.0),
            m_w: 1.0,
            floor_one: false,
        }
    }

    /// W(x) = 1 + |x|^2, for drift-condition usage where W >= 1.
    pub fn one_plus_squared_norm(dim: usize) -> Self {
        let mut w = Self::squared_norm(dim);
        w.name = "1+|x|^2".into();
        w.eval = Arc::new(|x: &[f64]| 1.0 + x.iter().map(|v| v * v).sum::<f64>());
        w.floor_one = true;
        w
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }

    pub fn hess(&self, x: &[f64]) -> Vec<f64> {
        (self.hess)(x)
    }

    /// Sampled TYPE invariants: gradient growth and, when claimed, the
    /// coercivity lower bound, on 1e4 points in [-10, 10]^d.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut rng = path_rng(0x11AB_70F5, streams::ASSUMPTION_SAMPLER, 0);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -10.0, 10.0)).collect();
            let w = self.value(&x);
            if !w.is_finite() || w < 0.0 {
                return Err(DecayError::invalid(format!(
                    "W({x:?}) = {w} is not a finite nonnegative value"
                )));
            }
            if self.floor_one && w < 1.0 {
                return Err(DecayError::invalid(format!("W({x:?}) = {w} < 1 but floor_one is set")));
            }
            let g = self.grad(&x);
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm > self.m_w * (1.0 + w) * (1.0 + 1e-9) {
                return Err(DecayError::invalid(format!(
                    "gradient growth violated at {x:?}: |grad W| = {gnorm} > M_W (1 + W)"
                )));
            }
            if let Some(c_w) = self.c_w {
                let norm_p = x.iter().map(|v| v * v).sum::<f64>().sqrt().powi(self.p as i32);
                if c_w * norm_p > w * (1.0 + 1e-9) + 1e-12 {
                    return Err(DecayError::invalid(format!(
                        "coercivity violated at {x:?}: c_W |x|^p = {} > W = {w}",
                        c_w * norm_p
                    )));
                }
            }
        }
        Ok(())
    }
}

impl C2Scalar for LyapunovFunction {
    fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some((self.grad)(x))
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some((self.hess)(x))
    }
}

/// Result of a sampled two-point assumption check. `m1_max` is minus the
/// largest sampled ratio (the binding constant); `m1_p99` uses the 99th
/// percentile instead, guarding against a single outlier pair.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub m1_max: f64,
    pub m1_p99: f64,
    pub worst_ratio: f64,
    pub worst_t: f64,
    pub worst_x: Vec<f64>,
    pub worst_y: Vec<f64>,
    pub n_used: usize,
    pub n_skipped: usize,
    pub t_range: (f64, f64),
    pub x_range: (f64, f64),
}

fn sampled_ratios<F>(
    dim: usize,
    t_range: (f64, f64),
    x_range: (f64, f64),
    n_samples: usize,
    seed: u64,
    ratio: F,
) -> Result<AssumptionCheck>
where
    F: Fn(f64, &[f64], &[f64]) -> Option<f64> + Sync,
{
    if n_samples == 0 {
        return Err(DecayError::invalid("n_samples must be >= 1"));
    }
    let samples: Vec<Option<(f64, f64, Vec<f64>, Vec<f64>)>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(seed, streams::ASSUMPTION_SAMPLER, k as u64);
            let t = uniform(&mut rng, t_range.0, t_range.1);
            let x: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, x_range.0, x_range.1)).collect();
            let y: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, x_range.0, x_range.1)).collect();
            ratio(t, &x, &y).map(|r| (r, t, x, y))
        })
        .collect();
    let mut ratios = Vec::with_capacity(n_samples);
    let mut worst: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    let mut skipped = 0usize;
    for s in samples {
        match s {
            Some((r, t, x, y)) => {
                if worst.as_ref().map_or(true, |(wr, ..)| r > *wr) {
                    worst = Some((r, t, x, y));
                }
                ratios.push(r);
            }
            None => skipped += 1,
        }
    }
    let (worst_ratio, worst_t, worst_x, worst_y) = worst.ok_or_else(|| {
        DecayError::invalid("all sampled pairs were degenerate (W(x - y) = 0 everywhere)")
    })?;
    Ok(AssumptionCheck {
        m1_max: -worst_ratio,
        m1_p99: -stats::percentile(&ratios, 0.99),
        worst_ratio,
        worst_t,
        worst_x,
        worst_y,
        n_used: ratios.len(),
        n_skipped: skipped,
        t_range,
        x_range,
    })
}

/// Two-point dissipativity: samples the ratio
/// [(L(t,x) - L(t,y)) W](x - y) / W(x - y) and returns M1 = -max ratio.
///
/// The two-point generator action is evaluated analytically from W's
/// derivatives: (b(t,x) - b(t,y)) . grad W(x-y)
/// + 1/2 tr[(sigma(t,x) - sigma(t,y))^T Hess W(x-y) (sigma(t,x) - sigma(t,y))].
pub fn check_dissipativity(
    model: &CoefficientSet,
    w: &LyapunovFunction,
    t_range: (f64, f64),
    x_range: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionCheck> {
    let d = model.dim();
    sampled_ratios(d, t_range, x_range, n_samples, seed, |t, x, y| {
        let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let w_delta = w.value(&delta);
        if w_delta.abs() < 1e-300 {
            return None;
        }
        let grad = w.grad(&delta);
        let hess = w.hess(&delta);
        let bx = model.eval_drift(t, x).ok()?;
        let by = model.eval_drift(t, y).ok()?;
        let sx = model.eval_diffusion(t, x).ok()?;
        let sy = model.eval_diffusion(t, y).ok()?;
        let mut num = 0.0;
        for i in 0..d {
            num += (bx[i] - by[i]) * grad[i];
        }
        for j in 0..d {
            for i in 0..d {
                for k in 0..d {
                    num += 0.5
                        * (sx[i * d + j] - sy[i * d + j])
                        * hess[i * d + k]
                        * (sx[k * d + j] - sy[k * d + j]);
                }
            }
        }
        Some(num / w_delta)
    })
}

/// Monotonicity: samples
/// [<x - y, b(t,x) - b(t,y)> + (m-1)/2 |sigma(t,x) - sigma(t,y)|_F^2] / |x - y|^2
/// and returns M1 = -max ratio.
pub fn check_monotonicity(
    model: &CoefficientSet,
    m: u32,
    t_range: (f64, f64),
    x_range: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionCheck> {
    if m < 2 {
        return Err(DecayError::invalid("monotonicity check needs m >= 2"));
    }
    let d = model.dim();
    sampled_ratios(d, t_range, x_range, n_samples, seed, |t, x, y| {
        let mut nsq = 0.0;
        for i in 0..d {
            let di = x[i] - y[i];
            nsq += di * di;
        }
        if nsq < 1e-300 {
            return None;
        }
        let bx = model.eval_drift(t, x).ok()?;
        let by = model.eval_drift(t, y).ok()?;
        let sx = model.eval_diffusion(t, x).ok()?;
        let sy = model.eval_diffusion(t, y).ok()?;
        let mut num = 0.0;
        for i in 0..d {
            num += (x[i] - y[i]) * (bx[i] - by[i]);
        }
        let mut frob = 0.0;
        for i in 0..d * d {
            let ds = sx[i] - sy[i];
            frob += ds * ds;
        }
        num += 0.5 * (m as f64 - 1.0) * frob;
        Some(num / nsq)
    })
}

/// One row of an empirical decay table.
#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub s: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Synchronous-coupling check of E[W(X_s - Y_s)] <= e^{-M1 s} W(x - y).
///
/// `m1_est` should come from a dissipativity check and must be positive.
/// A row passes when estimate <= bound (1 + tol) + 3 stderr.
#[allow(clippy::too_many_arguments)]
pub fn coupling_contraction(
    model: &CoefficientSet,
    w: &LyapunovFunction,
    x: &[f64],
    y: &[f64],
    times: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    m1_est: f64,
    tol: f64,
) -> Result<Vec<DecayRow>> {
    if !(m1_est > 0.0) {
        return Err(DecayError::invalid(format!(
            "coupling contraction needs a positive contraction estimate, got {m1_est}"
        )));
    }
    if times.is_empty() {
        return Err(DecayError::invalid("times must not be empty"));
    }
    let horizon = times.last().copied().unwrap();
    let grid = TimeGrid::fit(0.0, horizon, dt)?;
    let (a, b) = couple_paths(model, &grid, x, y, n_paths, seed, times)?;
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let w0 = w.value(&delta);
    let mut rows = Vec::with_capacity(times.len());
    for (r, &s) in times.iter().enumerate() {
        let vals: Vec<f64> = (0..n_paths)
            .map(|p| {
                let xa = a.state(p, r);
                let xb = b.state(p, r);
                let d: Vec<f64> = xa.iter().zip(xb).map(|(u, v)| u - v).collect();
                w.value(&d)
            })
            .collect();
        let (est, se) = stats::mean_stderr(&vals);
        let bound = (-m1_est * s).exp() * w0;
        rows.push(DecayRow {
            s,
            estimate: est,
            stderr: se,
            bound,
            pass: est <= bound * (1.0 + tol) + 3.0 * se,
        });
    }
    Ok(rows)
}

/// Sampled one-point drift condition L(t, x) W(x) <= -m1 W(x).
#[derive(Debug, Clone, Serialize)]
pub struct DriftConditionReport {
    pub holds: bool,
    /// Largest sampled LW / W; the condition requires it <= -m1.
    pub worst_ratio: f64,
    pub m1_claimed: f64,
    pub worst_t: f64,
    pub worst_x: Vec<f64>,
    pub t_range: (f64, f64),
    pub x_range: (f64, f64),
    pub n_used: usize,
}

pub fn check_drift_condition(
    model: &CoefficientSet,
    w: &LyapunovFunction,
    m1: f64,
    t_range: (f64, f64),
    x_range: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<DriftConditionReport> {
    if n_samples == 0 {
        return Err(DecayError::invalid("n_samples must be >= 1"));
    }
    let d = model.dim();
    let ratios: Vec<Option<(f64, f64, Vec<f64>)>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(seed, streams::ASSUMPTION_SAMPLER, k as u64);
            let t = uniform(&mut rng, t_range.0, t_range.1);
            let x: Vec<f64> = (0..d).map(|_| uniform(&mut rng, x_range.0, x_range.1)).collect();
            let wx = w.value(&x);
            if wx.abs() < 1e-12 {
                return None;
            }
            let lw = model.apply_generator(t, &x, w).ok()?;
            Some((lw / wx, t, x))
        })
        .collect();
    let mut worst: Option<(f64, f64, Vec<f64>)> = None;
    let mut used = 0usize;
    for r in ratios.into_iter().flatten() {
        used += 1;
        if worst.as_ref().map_or(true, |(wr, ..)| r.0 > *wr) {
            worst = Some(r);
        }
    }
    let (worst_ratio, worst_t, worst_x) =
        worst.ok_or_else(|| DecayError::invalid("all drift-condition samples were degenerate"))?;
    Ok(DriftConditionReport {
        holds: worst_ratio <= -m1 * (1.0 - 1e-9) + 1e-12,
        worst_ratio,
        m1_claimed: m1,
        worst_t,
        worst_x,
        t_range,
        x_range,
        n_used: used,
    })
}

/// Moment-decay outcome: the decay table only applies when the sampled drift
/// condition held on the region.
#[derive(Debug, Clone, Serialize)]
pub enum MomentDecayOutcome {
    NotApplicable { drift_report: DriftConditionReport },
    Table { drift_report: DriftConditionReport, rows: Vec<DecayRow> },
}

/// Empirical check of E[W(X_s)] <= e^{-m1 s} E[W(xi)] under the sampled
/// drift condition L W <= -m1 W.
#[allow(clippy::too_many_arguments)]
pub fn moment_decay(
    model: &CoefficientSet,
    w: &LyapunovFunction,
    m1: f64,
    init: &InitialCondition,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    tol: f64,
) -> Result<MomentDecayOutcome> {
    if times.is_empty() {
        return Err(DecayError::invalid("times must not be empty"));
    }
    let drift_report = check_drift_condition(
        model,
        w,
        m1,
        (0.0, 5.0),
        (-5.0, 5.0),
        10_000,
        seed,
    )?;
    if !drift_report.holds {
        return Ok(MomentDecayOutcome::NotApplicable { drift_report });
    }
    let horizon = times.last().copied().unwrap();
    let grid = TimeGrid::fit(0.0, horizon, dt)?;
    // Record t = 0 too: the same paths estimate E[W(xi)].
    let mut record = Vec::with_capacity(times.len() + 1);
    record.push(0.0);
    record.extend_from_slice(times);
    let ens = simulate_paths(model, &grid, init, n_paths, seed, &record)?;
    let w0: Vec<f64> = ens.map_column(0, |x| w.value(x));
    let (ew0, _) = stats::mean_stderr(&w0);
    let mut rows = Vec::with_capacity(times.len());
    for (r, &s) in times.iter().enumerate() {
        let vals: Vec<f64> = ens.map_column(r + 1, |x| w.value(x));
        let (est, se) = stats::mean_stderr(&vals);
        let bound = (-m1 * s).exp() * ew0;
        rows.push(DecayRow {
            s,
            estimate: est,
            stderr: se,
            bound,
            pass: est <= bound * (1.0 + tol) + 3.0 * se,
        });
    }
    Ok(MomentDecayOutcome::Table { drift_report, rows })
}
