//! Empirical measures and distances between laws: exact 1-d Wasserstein,
//! assignment-based and sliced Wasserstein in higher dimension, a binned
//! weighted-total-variation surrogate, invariant-measure estimation, the
//! convergence profile towards a static measure, the Chapman-Kolmogorov
//! consistency test and the limiting-process triangle bound.

use crate::error::{DecayError, Result};
use crate::lyapunov::{check_drift_condition, DriftConditionReport, LyapunovFunction};
use crate::models::CoefficientSet;
use crate::rng::{path_rng, streams};
use crate::sensitivity::fit_decay_rate;
use crate::simulate::{
    sequential_trajectory, simulate_paths_stream, simulate_two_leg, InitialCondition,
    PathEnsemble, TimeGrid,
};
use crate::stats::{self, LineFit};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Provenance of a sample cloud.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MeasureMeta {
    pub model: String,
    pub time: f64,
    pub seed: u64,
}

/// Weighted samples of a law; weights default to uniform 1/n.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    samples: Vec<f64>,
    n: usize,
    dim: usize,
    weights: Option<Vec<f64>>,
    pub meta: MeasureMeta,
}

impl EmpiricalMeasure {
    pub fn from_samples(samples: Vec<f64>, dim: usize, meta: MeasureMeta) -> Result<Self> {
        if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(DecayError::invalid("samples must be a nonempty n x d array"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(DecayError::invalid("samples must be finite"));
        }
        let n = samples.len() / dim;
        Ok(EmpiricalMeasure { samples, n, dim, weights: None, meta })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n {
            return Err(DecayError::invalid("one weight per sample required"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DecayError::invalid("weights must be finite and nonnegative"));
        }
        let total = stats::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(DecayError::invalid(format!("weights must sum to 1, got {total}")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn from_ensemble(ens: &PathEnsemble, record: usize, meta: MeasureMeta) -> Self {
        let dim = ens.dim();
        let n = ens.n_paths();
        let mut samples = Vec::with_capacity(n * dim);
        for p in 0..n {
            samples.extend_from_slice(ens.state(p, record));
        }
        EmpiricalMeasure { samples, n, dim, weights: None, meta }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.n as f64,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    pub fn column(&self, coord: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.sample(i)[coord]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, slot) in out.iter_mut().enumerate() {
            let weighted: Vec<f64> =
                (0..self.n).map(|i| self.weight(i) * self.sample(i)[c]).collect();
            *slot = stats::pairwise_sum(&weighted);
        }
        out
    }

    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = vec![0.0; self.dim];
        for (c, slot) in out.iter_mut().enumerate() {
            let weighted: Vec<f64> = (0..self.n)
                .map(|i| {
                    let d = self.sample(i)[c] - mean[c];
                    self.weight(i) * d * d
                })
                .collect();
            *slot = stats::pairwise_sum(&weighted) * self.n as f64 / (self.n as f64 - 1.0).max(1.0);
        }
        out
    }

    /// Writes `<stem>.csv` (header x0..x{d-1}, one sample per row, LF) and a
    /// `<stem>.meta.json` sidecar.
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut body = String::new();
        let header: Vec<String> = (0..self.dim).map(|c| format!("x{c}")).collect();
        body.push_str(&header.join(","));
        body.push('\n');
        for i in 0..self.n {
            let row: Vec<String> = self.sample(i).iter().map(|v| format!("{v}")).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        std::fs::write(dir.join(format!("{stem}.csv")), body)?;
        let sidecar = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join(format!("{stem}.meta.json")), sidecar)?;
        Ok(())
    }

    pub fn read_csv(dir: &Path, stem: &str) -> Result<Self> {
        let body = std::fs::read_to_string(dir.join(format!("{stem}.csv")))?;
        let mut lines = body.lines();
        let header = lines
            .next()
            .ok_or_else(|| DecayError::invalid("empty measure CSV"))?;
        let dim = header.split(',').count();
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            for field in line.split(',') {
                let v: f64 = field.parse().map_err(|_| {
                    DecayError::invalid(format!("bad float '{field}' on row {}", ln + 2))
                })?;
                samples.push(v);
            }
        }
        let meta: MeasureMeta = match std::fs::read_to_string(dir.join(format!("{stem}.meta.json")))
        {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => MeasureMeta::default(),
        };
        EmpiricalMeasure::from_samples(samples, dim, meta)
    }
}

fn weighted_quantiles(measure: &EmpiricalMeasure, m: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..measure.n()).collect();
    idx.sort_unstable_by(|&a, &b| {
        measure.sample(a)[0]
            .partial_cmp(&measure.sample(b)[0])
            .expect("finite samples")
    });
    let mut quantiles = Vec::with_capacity(m);
    let mut cum = 0.0;
    let mut k = 0usize;
    for j in 0..m {
        let target = (j as f64 + 0.5) / m as f64;
        while k < idx.len() && cum + measure.weight(idx[k]) < target {
            cum += measure.weight(idx[k]);
            k += 1;
        }
        let take = k.min(idx.len() - 1);
        quantiles.push(measure.sample(idx[take])[0]);
    }
    quantiles
}

fn wasserstein_1d_columns(mut a: Vec<f64>, mut b: Vec<f64>, p: f64) -> f64 {
    if a.len() == b.len() {
        a.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite"));
        b.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite"));
        let terms: Vec<f64> =
            a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(p)).collect();
        (stats::pairwise_sum(&terms) / a.len() as f64).powf(1.0 / p)
    } else {
        let meta = MeasureMeta::default();
        let ma = EmpiricalMeasure::from_samples(a, 1, meta.clone()).expect("nonempty");
        let mb = EmpiricalMeasure::from_samples(b, 1, meta).expect("nonempty");
        quantile_wasserstein(&ma, &mb, p)
    }
}

const QUANTILE_GRID: usize = 1024;

fn quantile_wasserstein(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> f64 {
    let qa = weighted_quantiles(a, QUANTILE_GRID);
    let qb = weighted_quantiles(b, QUANTILE_GRID);
    let terms: Vec<f64> =
        qa.iter().zip(&qb).map(|(x, y)| (x - y).abs().powf(p)).collect();
    (stats::pairwise_sum(&terms) / QUANTILE_GRID as f64).powf(1.0 / p)
}

/// Exact 1-d Wasserstein-p via sorted samples for equal uniform clouds;
/// 1024-point quantile interpolation otherwise.
pub fn wasserstein_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(DecayError::capability("wasserstein_1d needs d = 1 measures"));
    }
    if !(p >= 1.0) {
        return Err(DecayError::invalid(format!("Wasserstein order must satisfy p >= 1, got {p}")));
    }
    if a.is_uniform() && b.is_uniform() && a.n() == b.n() {
        Ok(wasserstein_1d_columns(a.column(0), b.column(0), p))
    } else {
        Ok(quantile_wasserstein(a, b, p))
    }
}

/// Exact optimal-assignment cost on a dense |x_i - y_j|^p matrix (cubic-time
/// Hungarian algorithm with potentials); uniform weights, equal n <= 512.
pub fn wasserstein_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(DecayError::invalid(format!("Wasserstein order must satisfy p >= 1, got {p}")));
    }
    if a.n() != b.n() || !a.is_uniform() || !b.is_uniform() {
        return Err(DecayError::invalid(
            "assignment distance needs equal sample counts with uniform weights",
        ));
    }
    if a.dim() != b.dim() {
        return Err(DecayError::invalid("dimension mismatch"));
    }
    let n = a.n();
    if n > 512 {
        return Err(DecayError::capability(
            "assignment solver is capped at n = 512; use wasserstein_sliced for larger clouds",
        ));
    }
    let d = a.dim();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let xi = a.sample(i);
        for j in 0..n {
            let yj = b.sample(j);
            let dist2: f64 = (0..d).map(|c| (xi[c] - yj[c]) * (xi[c] - yj[c])).sum();
            cost[i * n + j] = dist2.sqrt().powf(p);
        }
    }
    let total = hungarian_min_cost(&cost, n);
    Ok((total / n as f64).powf(1.0 / p))
}

/// Minimum-cost perfect matching on an n x n matrix (row-major), by the
/// potentials + shortest augmenting path formulation.
fn hungarian_min_cost(cost: &[f64], n: usize) -> f64 {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[(matched_row[j] - 1) * n + (j - 1)];
    }
    total
}

/// Sliced Wasserstein-p: root of the mean over random unit directions of the
/// projected 1-d W_p^p. Deterministic in the seed.
///
/// The raw sliced value underestimates W_p by a dimension factor; for
/// translated clouds it concentrates at |v| / sqrt(d). Multiply by sqrt(d)
/// when comparing against exact transport costs.
pub fn wasserstein_sliced(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    p: f64,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() < 2 {
        return Err(DecayError::invalid("sliced distance needs matching d >= 2 measures"));
    }
    if n_projections == 0 {
        return Err(DecayError::invalid("n_projections must be >= 1"));
    }
    if !(p >= 1.0) {
        return Err(DecayError::invalid(format!("Wasserstein order must satisfy p >= 1, got {p}")));
    }
    let d = a.dim();
    let mut acc = Vec::with_capacity(n_projections);
    for k in 0..n_projections {
        let mut rng = path_rng(seed, streams::PROJECTIONS, k as u64);
        let mut theta = vec![0.0; d];
        loop {
            let mut norm2 = 0.0;
            for t in theta.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *t = z;
                norm2 += z * z;
            }
            if norm2 > 1e-12 {
                let norm = norm2.sqrt();
                for t in theta.iter_mut() {
                    *t /= norm;
                }
                break;
            }
        }
        let proj = |m: &EmpiricalMeasure| -> Vec<f64> {
            (0..m.n())
                .map(|i| m.sample(i).iter().zip(&theta).map(|(x, t)| x * t).sum())
                .collect()
        };
        let w = wasserstein_1d_columns(proj(a), proj(b), p);
        acc.push(w.powf(p));
    }
    Ok((stats::pairwise_sum(&acc) / n_projections as f64).powf(1.0 / p))
}

/// Histogram estimate of the weighted total variation
/// sum over bins of (1 + W(center)) |a_hat - b_hat|.
#[derive(Debug, Clone, Serialize)]
pub struct WeightedTvEstimate {
    pub value: f64,
    pub bin_width: f64,
    /// Probability mass that fell outside the binning range (both clouds).
    pub overflow_mass: f64,
    pub overflow_flagged: bool,
}

pub fn weighted_tv_1d(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    w: &LyapunovFunction,
    n_bins: usize,
    range: (f64, f64),
) -> Result<WeightedTvEstimate> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(DecayError::capability("weighted TV is implemented in d = 1"));
    }
    if n_bins == 0 || !(range.1 > range.0) {
        return Err(DecayError::invalid("need n_bins >= 1 and a nonempty range"));
    }
    let width = (range.1 - range.0) / n_bins as f64;
    // Interior bins plus underflow/overflow at the range edges.
    let mut mass_a = vec![0.0; n_bins + 2];
    let mut mass_b = vec![0.0; n_bins + 2];
    let drop_into = |m: &EmpiricalMeasure, mass: &mut [f64]| {
        for i in 0..m.n() {
            let x = m.sample(i)[0];
            let slot = if x < range.0 {
                0
            } else if x >= range.1 {
                n_bins + 1
            } else {
                1 + (((x - range.0) / width) as usize).min(n_bins - 1)
            };
            mass[slot] += m.weight(i);
        }
    };
    drop_into(a, &mut mass_a);
    drop_into(b, &mut mass_b);
    let mut value = 0.0;
    for k in 0..n_bins {
        let center = range.0 + (k as f64 + 0.5) * width;
        value += (1.0 + w.value(&[center])) * (mass_a[k + 1] - mass_b[k + 1]).abs();
    }
    // Overflow bins are weighted at the range edges.
    value += (1.0 + w.value(&[range.0])) * (mass_a[0] - mass_b[0]).abs();
    value += (1.0 + w.value(&[range.1])) * (mass_a[n_bins + 1] - mass_b[n_bins + 1]).abs();
    let overflow_mass = mass_a[0] + mass_b[0] + mass_a[n_bins + 1] + mass_b[n_bins + 1];
    Ok(WeightedTvEstimate {
        value,
        bin_width: width,
        overflow_mass,
        overflow_flagged: overflow_mass > 0.0,
    })
}

/// Closed-form tag for a known invariant law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ClosedForm {
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
}

/// Long-run estimate of the invariant measure.
#[derive(Debug, Clone)]
pub struct InvariantEstimate {
    pub measure: EmpiricalMeasure,
    pub burn_in: f64,
    pub closed_form: Option<ClosedForm>,
}

/// Moment agreement against the closed form, with batch-means standard
/// errors (the thinned samples are still autocorrelated).
#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub mean_gap: Vec<f64>,
    pub mean_tol: Vec<f64>,
    pub var_gap: Vec<f64>,
    pub var_tol: Vec<f64>,
    pub pass: bool,
}

impl InvariantEstimate {
    /// First two moments versus the closed form within 4 batch-means
    /// standard errors. `None` when no closed form is attached.
    pub fn moment_check(&self) -> Option<MomentCheck> {
        let ClosedForm::Gaussian { mean, variance } = self.closed_form.as_ref()?;
        let d = self.measure.dim();
        let n = self.measure.n();
        let n_batches = 100.min(n / 2).max(2);
        let batch = n / n_batches;
        let mut mean_gap = Vec::with_capacity(d);
        let mut mean_tol = Vec::with_capacity(d);
        let mut var_gap = Vec::with_capacity(d);
        let mut var_tol = Vec::with_capacity(d);
        let mut pass = true;
        for c in 0..d {
            let col = self.measure.column(c);
            let overall_mean = stats::mean(&col);
            let batch_stat = |f: &dyn Fn(f64) -> f64| -> (f64, f64) {
                let means: Vec<f64> = (0..n_batches)
                    .map(|b| {
                        let chunk: Vec<f64> =
                            col[b * batch..(b + 1) * batch].iter().map(|&x| f(x)).collect();
                        stats::mean(&chunk)
                    })
                    .collect();
                let (m, se_between) = stats::mean_stderr(&means);
                (m, se_between)
            };
            let (m, m_se) = batch_stat(&|x| x);
            let (second, second_se) = batch_stat(&|x| (x - overall_mean) * (x - overall_mean));
            let gap_m = (m - mean[c]).abs();
            let tol_m = 4.0 * m_se;
            let gap_v = (second - variance[c]).abs();
            let tol_v = 4.0 * second_se;
            pass &= gap_m <= tol_m && gap_v <= tol_v;
            mean_gap.push(gap_m);
            mean_tol.push(tol_m);
            var_gap.push(gap_v);
            var_tol.push(tol_v);
        }
        Some(MomentCheck { mean_gap, mean_tol, var_gap, var_tol, pass })
    }
}

/// One long trajectory from the origin: discard `burn_in`, then record every
/// `thinning` time units as samples of the invariant law.
pub fn estimate_invariant(
    model: &CoefficientSet,
    burn_in: f64,
    n_samples: usize,
    thinning: f64,
    seed: u64,
    dt: f64,
    closed_form: Option<ClosedForm>,
) -> Result<InvariantEstimate> {
    if !model.flags.time_homogeneous {
        return Err(DecayError::invalid(
            "invariant estimation needs a time-homogeneous model; take limiting_model() first",
        ));
    }
    if n_samples == 0 || !(thinning > 0.0) || burn_in < 0.0 || !(dt > 0.0) {
        return Err(DecayError::invalid("bad invariant sampler parameters"));
    }
    let steps_per_thin = ((thinning / dt).round() as usize).max(1);
    let dt_eff = thinning / steps_per_thin as f64;
    let burn_steps = (burn_in / dt_eff).ceil() as usize;
    let total_steps = burn_steps + n_samples * steps_per_thin;
    let d = model.dim();
    let mut x = vec![0.0; d];
    let mut rng = path_rng(seed, streams::MAIN, 0);
    let mut samples = Vec::with_capacity(n_samples * d);
    sequential_trajectory(model, 0.0, dt_eff, total_steps, &mut x, &mut rng, |k, state| {
        if k >= burn_steps && (k - burn_steps + 1) % steps_per_thin == 0 {
            samples.extend_from_slice(state);
        }
    })?;
    debug_assert_eq!(samples.len(), n_samples * d);
    let measure = EmpiricalMeasure::from_samples(
        samples,
        d,
        MeasureMeta { model: String::new(), time: f64::INFINITY, seed },
    )?;
    Ok(InvariantEstimate { measure, burn_in, closed_form })
}

/// Distance metric for convergence profiles.
#[derive(Clone)]
pub enum Metric {
    W1,
    W2,
    Wtv(LyapunovFunction),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::W1 => "w1",
            Metric::W2 => "w2",
            Metric::Wtv(_) => "wtv",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub s: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceProfile {
    pub rows: Vec<ConvergenceRow>,
    pub fit: Option<LineFit>,
}

fn distance_to(metric: &Metric, a: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    match metric {
        Metric::W1 => wasserstein_1d(a, q, 1.0),
        Metric::W2 => wasserstein_1d(a, q, 2.0),
        Metric::Wtv(w) => {
            // 200 bins over +-6 sd of the reference law.
            let sd = q.variance()[0].sqrt().max(1e-6);
            let est = weighted_tv_1d(a, q, w, 200, (-6.0 * sd, 6.0 * sd))?;
            Ok(est.value)
        }
    }
}

/// Distance between the law at time 1 + s (started from `init` at time 1)
/// and the reference measure, for each s, with a log-slope fit over the
/// positive distances.
#[allow(clippy::too_many_arguments)]
pub fn convergence_profile(
    model: &CoefficientSet,
    init: &InitialCondition,
    q: &InvariantEstimate,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    metric: &Metric,
) -> Result<ConvergenceProfile> {
    if times.is_empty() {
        return Err(DecayError::invalid("times must not be empty"));
    }
    if model.dim() != 1 {
        return Err(DecayError::capability("convergence profile distances are d = 1"));
    }
    let horizon = 1.0 + times.last().copied().unwrap();
    let grid = TimeGrid::fit(1.0, horizon, dt)?;
    let record: Vec<f64> = times.iter().map(|&s| 1.0 + s).collect();
    let ens = simulate_paths_stream(model, &grid, init, n_paths, seed, streams::MAIN, &record)?;
    let mut rows = Vec::with_capacity(times.len());
    for (r, &s) in times.iter().enumerate() {
        let cloud = EmpiricalMeasure::from_ensemble(
            &ens,
            r,
            MeasureMeta { model: String::new(), time: 1.0 + s, seed },
        );
        rows.push(ConvergenceRow { s, distance: distance_to(metric, &cloud, &q.measure)? });
    }
    let positive: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.distance > 0.0).collect();
    let fit = if positive.len() >= 3 {
        let t: Vec<f64> = positive.iter().map(|r| r.s).collect();
        let v: Vec<f64> = positive.iter().map(|r| r.distance).collect();
        Some(fit_decay_rate(&t, &v, &vec![0.0; v.len()])?)
    } else {
        None
    };
    Ok(ConvergenceProfile { rows, fit })
}

/// Two-sample KS comparison between direct and two-leg simulation to the
/// same terminal time (Chapman-Kolmogorov consistency).
#[derive(Debug, Clone, Serialize)]
pub struct CkResult {
    pub ks: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn ck_consistency(
    model: &CoefficientSet,
    tau: f64,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<CkResult> {
    if !(0.0..=1.0).contains(&tau) || tau + s < 1.0 || s < 0.0 {
        return Err(DecayError::invalid(format!(
            "Chapman-Kolmogorov check needs tau <= 1 <= tau + s, got tau = {tau}, s = {s}"
        )));
    }
    let threshold = stats::ks_threshold_1pct(n_paths, n_paths);
    if s == 0.0 {
        // Both terminal laws are the point mass at x.
        return Ok(CkResult { ks: 0.0, threshold, pass: true });
    }
    let two_leg = simulate_two_leg(model, tau, s, x, n_paths, seed, dt)?;
    let grid = TimeGrid::fit(tau, tau + s, dt)?;
    let direct = simulate_paths_stream(
        model,
        &grid,
        &InitialCondition::point(x),
        n_paths,
        seed,
        streams::MAIN,
        &[tau + s],
    )?;
    let mut ks: f64 = 0.0;
    for c in 0..model.dim() {
        let a = direct.coordinate_column(0, c);
        let b = two_leg.coordinate_column(0, c);
        ks = ks.max(stats::ks_statistic(&a, &b));
    }
    Ok(CkResult { ks, threshold, pass: ks < threshold })
}

/// One row of the limiting-process comparison.
#[derive(Debug, Clone, Serialize)]
pub struct LimitingRow {
    pub s: f64,
    /// E[W(X_{1+s})] + E[W(Z_{1+s})], the triangle-bound surrogate for the
    /// weighted gap between the two laws.
    pub gap: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub enum LimitingOutcome {
    NotApplicable { drift_report: DriftConditionReport },
    Table { drift_report: DriftConditionReport, rows: Vec<LimitingRow> },
}

/// Compares the non-autonomous process X with its declared limit Z via the
/// bound gap(s) <= 2 e^{-m1 s} W(x). Applies only when the sampled drift
/// condition L W <= -m1 W holds.
#[allow(clippy::too_many_arguments)]
pub fn limiting_comparison(
    model: &CoefficientSet,
    w: &LyapunovFunction,
    m1: f64,
    x: &[f64],
    times: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
    tol: f64,
) -> Result<LimitingOutcome> {
    if times.is_empty() {
        return Err(DecayError::invalid("times must not be empty"));
    }
    let limit = model.limiting_model()?;
    let drift_report =
        check_drift_condition(model, w, m1, (0.0, 5.0), (-5.0, 5.0), 10_000, seed)?;
    if !drift_report.holds {
        return Ok(LimitingOutcome::NotApplicable { drift_report });
    }
    let horizon = 1.0 + times.last().copied().unwrap();
    let grid = TimeGrid::fit(1.0, horizon, dt)?;
    let record: Vec<f64> = times.iter().map(|&s| 1.0 + s).collect();
    let xs = simulate_paths_stream(
        model,
        &grid,
        &InitialCondition::point(x),
        n_paths,
        seed,
        streams::MAIN,
        &record,
    )?;
    let zs = simulate_paths_stream(
        &limit,
        &grid,
        &InitialCondition::point(x),
        n_paths,
        seed,
        streams::AUXILIARY,
        &record,
    )?;
    let w0 = w.value(x);
    let mut rows = Vec::with_capacity(times.len());
    for (r, &s) in times.iter().enumerate() {
        let wx: Vec<f64> = xs.map_column(r, |st| w.value(st));
        let wz: Vec<f64> = zs.map_column(r, |st| w.value(st));
        let (mx, sex) = stats::mean_stderr(&wx);
        let (mz, sez) = stats::mean_stderr(&wz);
        let gap = mx + mz;
        let stderr = (sex * sex + sez * sez).sqrt();
        let bound = 2.0 * (-m1 * s).exp() * w0;
        rows.push(LimitingRow {
            s,
            gap,
            stderr,
            bound,
            pass: gap <= bound * (1.0 + tol) + 3.0 * stderr,
        });
    }
    Ok(LimitingOutcome::Table { drift_report, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ou_model, ou_relax_model};

    fn meas(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_samples(xs.to_vec(), 1, MeasureMeta::default()).unwrap()
    }

    fn meas2(points: &[(f64, f64)]) -> EmpiricalMeasure {
        let mut flat = Vec::new();
        for (a, b) in points {
            flat.push(*a);
            flat.push(*b);
        }
        EmpiricalMeasure::from_samples(flat, 2, MeasureMeta::default()).unwrap()
    }

    #[test]
    fn w1d_examples() {
        let a = meas(&[0.0, 2.0]);
        let b = meas(&[1.0, 3.0]);
        assert_eq!(wasserstein_1d(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&meas(&[0.0]), &meas(&[1.0]), 3.0).unwrap(), 1.0);
        assert!((wasserstein_1d(&a, &b, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_matches_sorted_in_1d() {
        let mut rng = path_rng(5, 0, 0);
        let a: Vec<f64> = (0..64).map(|_| crate::rng::uniform(&mut rng, -3.0, 3.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| crate::rng::uniform(&mut rng, -3.0, 3.0)).collect();
        for p in [1.0, 2.0] {
            let exact = wasserstein_1d(&meas(&a), &meas(&b), p).unwrap();
            let assigned = wasserstein_assignment(&meas(&a), &meas(&b), p).unwrap();
            assert!((exact - assigned).abs() < 1e-12, "p = {p}: {exact} vs {assigned}");
        }
    }

    #[test]
    fn assignment_permuted_points_is_zero() {
        let a = meas2(&[(0.0, 1.0), (2.0, -1.0), (0.5, 0.5)]);
        let b = meas2(&[(0.5, 0.5), (0.0, 1.0), (2.0, -1.0)]);
        assert!(wasserstein_assignment(&a, &b, 2.0).unwrap() < 1e-12);
    }

    #[test]
    fn assignment_single_pair_euclidean() {
        let a = meas2(&[(0.0, 0.0)]);
        let b = meas2(&[(3.0, 4.0)]);
        assert!((wasserstein_assignment(&a, &b, 2.0).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sliced_translation_bounds() {
        let mut rng = path_rng(7, 0, 0);
        let pts: Vec<(f64, f64)> = (0..128)
            .map(|_| (crate::rng::uniform(&mut rng, -1.0, 1.0), crate::rng::uniform(&mut rng, -1.0, 1.0)))
            .collect();
        let a = meas2(&pts);
        let v = (0.6, -0.8); // |v| = 1
        let shifted: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + v.0, y + v.1)).collect();
        let b = meas2(&shifted);
        assert!(wasserstein_sliced(&a, &a, 2.0, 32, 3).unwrap() < 1e-12);
        let sw = wasserstein_sliced(&a, &b, 2.0, 64, 3).unwrap();
        assert!(sw > 0.0 && sw <= 1.0 + 1e-9, "sliced = {sw}");
    }

    #[test]
    fn sliced_close_to_assignment_on_gaussians() {
        let mut rng = path_rng(11, 0, 0);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| -> EmpiricalMeasure {
            let pts: Vec<(f64, f64)> = (0..256)
                .map(|_| {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    (a + shift, b + shift)
                })
                .collect();
            meas2(&pts)
        };
        let a = draw(&mut rng, 0.0);
        let b = draw(&mut rng, 1.0);
        let exact = wasserstein_assignment(&a, &b, 2.0).unwrap();
        let sliced = wasserstein_sliced(&a, &b, 2.0, 128, 3).unwrap();
        // The dimension-adjusted sliced value tracks the exact cost.
        let adjusted = sliced * 2.0f64.sqrt();
        assert!(
            (adjusted - exact).abs() <= 0.25 * exact,
            "adjusted sliced {adjusted} vs exact {exact}"
        );
    }

    #[test]
    fn sliced_matches_direct_computation_over_drawn_directions() {
        // For a translation, each projection contributes |<v, theta>|; the
        // sliced value equals the root-mean of those contributions over the
        // same drawn directions and in particular stays below |v|.
        let mut rng = path_rng(7, 0, 0);
        let pts: Vec<(f64, f64)> = (0..64)
            .map(|_| (crate::rng::uniform(&mut rng, -1.0, 1.0), crate::rng::uniform(&mut rng, -1.0, 1.0)))
            .collect();
        let a = meas2(&pts);
        let v = (0.6, -0.8);
        let shifted: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + v.0, y + v.1)).collect();
        let b = meas2(&shifted);
        let (seed, n_proj) = (13u64, 32usize);
        let sliced = wasserstein_sliced(&a, &b, 2.0, n_proj, seed).unwrap();
        let mut acc = 0.0;
        for k in 0..n_proj {
            let mut dir_rng = path_rng(seed, streams::PROJECTIONS, k as u64);
            let mut theta = [0.0f64; 2];
            loop {
                let z0: f64 = dir_rng.sample(StandardNormal);
                let z1: f64 = dir_rng.sample(StandardNormal);
                let n2 = z0 * z0 + z1 * z1;
                if n2 > 1e-12 {
                    let n = n2.sqrt();
                    theta = [z0 / n, z1 / n];
                    break;
                }
            }
            let dot = v.0 * theta[0] + v.1 * theta[1];
            acc += dot * dot;
        }
        let direct = (acc / n_proj as f64).sqrt();
        assert!((sliced - direct).abs() < 1e-9, "sliced {sliced} vs direct {direct}");
        assert!(sliced > 0.0 && sliced <= 1.0 + 1e-12);
    }

    #[test]
    fn wtv_same_samples_is_zero() {
        let a = meas(&[0.1, 0.5, -0.3]);
        let w = LyapunovFunction::squared_norm(1);
        let est = weighted_tv_1d(&a, &a, &w, 50, (-2.0, 2.0)).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn wtv_disjoint_supports_with_zero_weight() {
        let a = meas(&[-1.0, -1.2, -0.8]);
        let b = meas(&[1.0, 1.2, 0.8]);
        let zero = LyapunovFunction::new(
            "0",
            std::sync::Arc::new(|_: &[f64]| 0.0),
            std::sync::Arc::new(|x: &[f64]| vec![0.0; x.len()]),
            std::sync::Arc::new(|x: &[f64]| vec![0.0; x.len() * x.len()]),
            0,
            None,
            1.0,
            false,
        );
        let est = weighted_tv_1d(&a, &b, &zero, 100, (-2.0, 2.0)).unwrap();
        assert!((est.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn measure_csv_roundtrip() {
        let dir = std::env::temp_dir().join(format!("decay-measure-{}", std::process::id()));
        let m = meas2(&[(0.5, -1.0), (2.0, 3.0)]);
        m.write_csv(&dir, "cloud").unwrap();
        let back = EmpiricalMeasure::read_csv(&dir, "cloud").unwrap();
        assert_eq!(back.n(), 2);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.sample(1), &[2.0, 3.0]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invariant_deterministic_contraction() {
        // sigma = 0, b = -x: post-burn-in samples sit within e^{-burn} |x0|
        // of the fixed point; starting at the origin they are exactly 0.
        let model = ou_model(1.0, 0.0, 1);
        let inv = estimate_invariant(&model, 5.0, 50, 0.1, 3, 1e-2, None).unwrap();
        for i in 0..inv.measure.n() {
            assert!(inv.measure.sample(i)[0].abs() < 1e-10);
        }
    }

    #[test]
    fn invariant_requires_time_homogeneous() {
        let model = ou_relax_model(1.0);
        assert!(estimate_invariant(&model, 1.0, 10, 0.1, 3, 1e-2, None).is_err());
        assert!(estimate_invariant(&model.limiting_model().unwrap(), 1.0, 10, 0.1, 3, 1e-2, None)
            .is_ok());
    }

    #[test]
    fn ck_point_masses() {
        let model = ou_model(1.0, 0.0, 1);
        // Deterministic flow: identical point masses.
        let r = ck_consistency(&model, 0.5, 1.0, &[1.0], 500, 3, 1e-2).unwrap();
        assert!(r.ks < 1e-12, "ks = {}", r.ks);
        // tau = 1, s = 0: both samples are delta_x.
        let r = ck_consistency(&model, 1.0, 0.0, &[1.0], 500, 3, 1e-2).unwrap();
        assert_eq!(r.ks, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn limiting_autonomous_reduces_to_moment_bound() {
        // Autonomous noiseless ou with W = x^2 satisfies L W = -2 W; X and Z
        // coincide so the gap is 2 E[W(X_s)] <= 2 e^{-2 s} W(x).
        let model = ou_model(1.0, 0.0, 1);
        let w = LyapunovFunction::squared_norm(1);
        let out =
            limiting_comparison(&model, &w, 2.0, &[1.0], &[1.0, 2.0], 100, 3, 1e-3, 0.05).unwrap();
        match out {
            LimitingOutcome::Table { rows, .. } => {
                for row in rows {
                    assert!(row.pass, "s = {}: {} vs {}", row.s, row.gap, row.bound);
                }
            }
            other => panic!("expected table, got {other:?}"),
        }
    }

    #[test]
    fn limiting_not_applicable_with_noise_near_origin() {
        // sigma > 0 makes LW/W blow up near x = 0 for W = x^2.
        let model = ou_model(1.0, 1.0, 1);
        let w = LyapunovFunction::squared_norm(1);
        let out =
            limiting_comparison(&model, &w, 2.0, &[1.0], &[1.0], 100, 3, 1e-2, 0.05).unwrap();
        assert!(matches!(out, LimitingOutcome::NotApplicable { .. }));
    }

    #[test]
    fn limiting_zero_start_zero_gap() {
        let model = ou_relax_model(0.0);
        let w = LyapunovFunction::squared_norm(1);
        let out =
            limiting_comparison(&model, &w, 2.0, &[0.0], &[1.0], 50, 3, 1e-2, 0.05).unwrap();
        match out {
            LimitingOutcome::Table { rows, .. } => {
                assert_eq!(rows[0].gap, 0.0);
                assert_eq!(rows[0].bound, 0.0);
                assert!(rows[0].pass);
            }
            other => panic!("expected table, got {other:?}"),
        }
    }
}
