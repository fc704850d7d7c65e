//! Tamed Euler-Maruyama path simulation with tangent flows, synchronous
//! couplings and restartable two-leg runs.
//!
//! Paths are independent work items: path i draws its increments from the
//! counter-based stream `(seed, stream, i)` and writes into its own slice of
//! the ensemble buffer, so ensembles are bit-identical for any worker count.
//! Means and variances over ensembles go through [`crate::stats`], whose
//! reductions use a fixed tree order.

use crate::error::{DecayError, Result};
use crate::models::CoefficientSet;
use crate::rng::{path_rng, streams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::Arc;

/// Uniform step grid on [t0, horizon].
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Strict constructor: `dt` must tile [t0, horizon] exactly (to 1e-12
    /// relative).
    pub fn new(t0: f64, horizon: f64, dt: f64) -> Result<Self> {
        if !(t0 >= 0.0 && t0.is_finite()) {
            return Err(DecayError::invalid(format!("t0 must be finite and >= 0, got {t0}")));
        }
        if !(horizon > t0) {
            return Err(DecayError::invalid(format!(
                "horizon must exceed t0, got [{t0}, {horizon}]"
            )));
        }
        if !(dt > 0.0) {
            return Err(DecayError::invalid(format!("dt must be positive, got {dt}")));
        }
        let n_steps = ((horizon - t0) / dt).round() as usize;
        let tol = 1e-12 * horizon.abs().max(1.0);
        if n_steps == 0 || (t0 + n_steps as f64 * dt - horizon).abs() > tol {
            return Err(DecayError::invalid(format!(
                "dt = {dt} does not tile [{t0}, {horizon}]"
            )));
        }
        Ok(TimeGrid { t0, horizon, dt, n_steps })
    }

    /// Tolerant constructor: rounds the step count and stretches dt so the
    /// horizon is hit exactly. Used by estimators that accept a requested dt.
    pub fn fit(t0: f64, horizon: f64, dt: f64) -> Result<Self> {
        if !(t0 >= 0.0 && t0.is_finite()) {
            return Err(DecayError::invalid(format!("t0 must be finite and >= 0, got {t0}")));
        }
        if !(horizon > t0) {
            return Err(DecayError::invalid(format!(
                "horizon must exceed t0, got [{t0}, {horizon}]"
            )));
        }
        if !(dt > 0.0) {
            return Err(DecayError::invalid(format!("dt must be positive, got {dt}")));
        }
        let n_steps = (((horizon - t0) / dt).round() as usize).max(1);
        let dt = (horizon - t0) / n_steps as f64;
        Ok(TimeGrid { t0, horizon, dt, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time_at(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }
}

/// Initial state: a fixed point or a per-path sampler. A sampler draws from
/// the path's own stream before any increments, so reproducibility holds
/// either way.
#[derive(Clone)]
pub enum InitialCondition {
    Point(Vec<f64>),
    Sampler(Arc<dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Send + Sync>),
}

impl InitialCondition {
    pub fn point(x: &[f64]) -> Self {
        InitialCondition::Point(x.to_vec())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, dim: usize) -> Result<Vec<f64>> {
        let x = match self {
            InitialCondition::Point(p) => p.clone(),
            InitialCondition::Sampler(f) => f(rng),
        };
        if x.len() != dim || x.iter().any(|v| !v.is_finite()) {
            return Err(DecayError::invalid(
                "initial condition must be finite with the model dimension",
            ));
        }
        Ok(x)
    }
}

/// Record step indices mapped from requested times.
#[derive(Debug, Clone)]
struct RecordPlan {
    steps: Vec<usize>,
    times: Vec<f64>,
}

impl RecordPlan {
    fn new(grid: &TimeGrid, record_at: &[f64]) -> Result<Self> {
        if record_at.is_empty() {
            return Err(DecayError::invalid("record_at must not be empty"));
        }
        let mut steps = Vec::with_capacity(record_at.len());
        let mut times = Vec::with_capacity(record_at.len());
        let mut last: Option<usize> = None;
        for &t in record_at {
            let k = ((t - grid.t0) / grid.dt).round();
            if k < 0.0 || k as usize > grid.n_steps {
                return Err(DecayError::invalid(format!(
                    "record time {t} outside grid [{}, {}]",
                    grid.t0, grid.horizon
                )));
            }
            let k = k as usize;
            if (grid.time_at(k) - t).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(DecayError::invalid(format!(
                    "record time {t} is not a grid point (dt = {})",
                    grid.dt
                )));
            }
            if let Some(prev) = last {
                if k <= prev {
                    return Err(DecayError::invalid("record times must be strictly increasing"));
                }
            }
            last = Some(k);
            steps.push(k);
            times.push(grid.time_at(k));
        }
        Ok(RecordPlan { steps, times })
    }

    fn len(&self) -> usize {
        self.steps.len()
    }
}

/// Simulated states at the recorded times: `n_paths x n_record x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    n_paths: usize,
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    pub seed: u64,
    pub model_name: String,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, path: usize, record: usize) -> &[f64] {
        let base = (path * self.times.len() + record) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// One coordinate across paths, in path order.
    pub fn coordinate_column(&self, record: usize, coord: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, record)[coord]).collect()
    }

    /// f applied to every path state at one record, in path order.
    pub fn map_column<F: Fn(&[f64]) -> f64>(&self, record: usize, f: F) -> Vec<f64> {
        (0..self.n_paths).map(|p| f(self.state(p, record))).collect()
    }

    pub fn record_index_of(&self, time: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&t| (t - time).abs() <= 1e-9 * time.abs().max(1.0))
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }
}

/// First and (optionally, d = 1) second variation flows at the recorded
/// times. J is stored row-major d x d per record.
#[derive(Debug, Clone)]
pub struct TangentEnsemble {
    n_paths: usize,
    dim: usize,
    times: Vec<f64>,
    first: Vec<f64>,
    second: Option<Vec<f64>>,
}

impl TangentEnsemble {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn first(&self, path: usize, record: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        let base = (path * self.times.len() + record) * dd;
        &self.first[base..base + dd]
    }

    pub fn second(&self, path: usize, record: usize) -> Option<f64> {
        self.second
            .as_ref()
            .map(|k| k[path * self.times.len() + record])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TangentOrder {
    First,
    Second,
}

/// Precomputed sigma(t_k) for additive-noise models: one evaluation per step
/// instead of one per step per path.
fn sigma_table(model: &CoefficientSet, grid: &TimeGrid) -> Option<Vec<f64>> {
    if !model.flags.additive_noise {
        return None;
    }
    let d = model.dim();
    let x0 = vec![0.0; d];
    let mut table = vec![0.0; grid.n_steps * d * d];
    let mut buf = vec![0.0; d * d];
    for k in 0..grid.n_steps {
        model.diffusion_into(grid.time_at(k), &x0, &mut buf);
        table[k * d * d..(k + 1) * d * d].copy_from_slice(&buf);
    }
    Some(table)
}

struct LegSpec<'a> {
    model: &'a CoefficientSet,
    grid: TimeGrid,
    plan: RecordPlan,
    sigma_table: Option<Vec<f64>>,
}

impl<'a> LegSpec<'a> {
    fn new(model: &'a CoefficientSet, grid: TimeGrid, record_at: &[f64]) -> Result<Self> {
        if let Some(h) = model.valid_horizon() {
            if grid.horizon > h + 1e-9 {
                return Err(DecayError::invalid(format!(
                    "grid horizon {} exceeds the model's valid horizon {}",
                    grid.horizon, h
                )));
            }
        }
        let plan = RecordPlan::new(&grid, record_at)?;
        Ok(LegSpec {
            model,
            sigma_table: sigma_table(model, &grid),
            grid,
            plan,
        })
    }
}

/// Per-path scratch, allocated once per path.
struct Scratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    db: Vec<f64>,
    jac: Vec<f64>,
    sig_jac: Vec<f64>,
    jtmp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            drift: vec![0.0; d],
            sigma: vec![0.0; d * d],
            db: vec![0.0; d],
            jac: vec![0.0; d * d],
            sig_jac: vec![0.0; d * d * d],
            jtmp: vec![0.0; d * d],
        }
    }
}

#[inline]
fn tame(model: &CoefficientSet, dt: f64, drift: &mut [f64]) {
    if model.flags.superlinear_drift {
        let norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 1.0 / (1.0 + dt * norm);
        for v in drift.iter_mut() {
            *v *= scale;
        }
    }
}

/// Advance one or more trajectories sharing the same Brownian increments
/// through one leg, writing recorded states into `outs[s]` (layout
/// n_record x d). Returns Err((step, time)) on divergence.
fn run_bundle_leg(
    spec: &LegSpec<'_>,
    rng: &mut ChaCha8Rng,
    states: &mut [Vec<f64>],
    outs: &mut [&mut [f64]],
    scratch: &mut Scratch,
) -> std::result::Result<(), (usize, f64)> {
    let d = spec.model.dim();
    let dt = spec.grid.dt;
    let sq_dt = dt.sqrt();
    let mut rec = 0usize;
    if spec.plan.steps[0] == 0 {
        for (s, out) in states.iter().zip(outs.iter_mut()) {
            out[..d].copy_from_slice(s);
        }
        rec = 1;
    }
    let Scratch { drift, sigma, db, .. } = scratch;
    for k in 0..spec.grid.n_steps {
        let t = spec.grid.time_at(k);
        for v in db.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sq_dt * z;
        }
        for x in states.iter_mut() {
            spec.model.drift_into(t, x, drift);
            tame(spec.model, dt, drift);
            let sig: &[f64] = match &spec.sigma_table {
                Some(table) => &table[k * d * d..(k + 1) * d * d],
                None => {
                    spec.model.diffusion_into(t, x, sigma);
                    sigma
                }
            };
            let mut finite = true;
            for i in 0..d {
                let mut dx = drift[i] * dt;
                for j in 0..d {
                    dx += sig[i * d + j] * db[j];
                }
                x[i] += dx;
                finite &= x[i].is_finite();
            }
            if !finite {
                return Err((k, t));
            }
        }
        if rec < spec.plan.len() && spec.plan.steps[rec] == k + 1 {
            for (s, out) in states.iter().zip(outs.iter_mut()) {
                out[rec * d..rec * d + d].copy_from_slice(s);
            }
            rec += 1;
        }
    }
    Ok(())
}

/// Tangent-process leg for a single trajectory. J evolves with the drift and
/// diffusion Jacobians evaluated at the pre-step state and driven by the same
/// increments as the state; K (d = 1) carries the second variation.
#[allow(clippy::too_many_arguments)]
fn run_tangent_leg(
    spec: &LegSpec<'_>,
    rng: &mut ChaCha8Rng,
    x: &mut [f64],
    jmat: &mut [f64],
    kval: &mut f64,
    order: TangentOrder,
    out_x: &mut [f64],
    out_j: &mut [f64],
    out_k: Option<&mut [f64]>,
    scratch: &mut Scratch,
) -> std::result::Result<(), (usize, f64)> {
    let d = spec.model.dim();
    let dd = d * d;
    let dt = spec.grid.dt;
    let sq_dt = dt.sqrt();
    let additive = spec.model.flags.additive_noise;
    let mut out_k = out_k;
    let mut rec = 0usize;
    let record = |rec: usize,
                      x: &[f64],
                      jmat: &[f64],
                      kval: f64,
                      out_x: &mut [f64],
                      out_j: &mut [f64],
                      out_k: &mut Option<&mut [f64]>| {
        out_x[rec * d..rec * d + d].copy_from_slice(x);
        out_j[rec * dd..rec * dd + dd].copy_from_slice(jmat);
        if let Some(out) = out_k.as_deref_mut() {
            out[rec] = kval;
        }
    };
    if spec.plan.steps[0] == 0 {
        record(0, x, jmat, *kval, out_x, out_j, &mut out_k);
        rec = 1;
    }
    let superlinear = spec.model.flags.superlinear_drift;
    let Scratch { drift, sigma, db, jac, sig_jac, jtmp } = scratch;
    for k in 0..spec.grid.n_steps {
        let t = spec.grid.time_at(k);
        for v in db.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sq_dt * z;
        }
        // All coefficient data at the pre-step state.
        spec.model.drift_into(t, x, drift);
        spec.model.drift_jacobian_into(t, x, jac);
        // For tamed schemes the tangent differentiates the tamed drift
        // b / (1 + dt |b|); that keeps J consistent with common-noise finite
        // differences of the scheme and keeps the recursion stable where the
        // raw Jacobian is enormous.
        let mut tame_u = 1.0;
        let mut raw_first = jac[0];
        if superlinear {
            let norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let u = 1.0 / (1.0 + dt * norm);
                tame_u = u;
                raw_first = jac[0];
                // grad|b|_l = sum_j b_j jac[j][l] / |b|
                for l in 0..d {
                    let mut gnorm = 0.0;
                    for j in 0..d {
                        gnorm += drift[j] * jac[j * d + l];
                    }
                    gnorm /= norm;
                    for r in 0..d {
                        jac[r * d + l] = jac[r * d + l] * u - drift[r] * dt * gnorm * u * u;
                    }
                }
            }
        }
        let sig: &[f64] = match &spec.sigma_table {
            Some(table) => &table[k * dd..(k + 1) * dd],
            None => {
                spec.model.diffusion_into(t, x, sigma);
                sigma
            }
        };
        if !additive {
            spec.model.diffusion_jacobian_into(t, x, sig_jac);
        }
        // J_{k+1} = J + (Jb J) dt + sum_j (Jsigma_j J) dB_j.
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += jac[r * d + l] * jmat[l * d + c];
                }
                jtmp[r * d + c] = acc * dt;
            }
        }
        if !additive {
            for j in 0..d {
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for l in 0..d {
                            acc += sig_jac[(r * d + j) * d + l] * jmat[l * d + c];
                        }
                        jtmp[r * d + c] += acc * db[j];
                    }
                }
            }
        }
        if order == TangentOrder::Second {
            // d = 1 second variation. With taming the scalar drift second
            // derivative becomes b'' u^2 - 2 dt sign(b) (b')^2 u^3.
            let mut d2b = spec.model.drift_hessian_at(t, x);
            if superlinear && tame_u < 1.0 {
                let u = tame_u;
                d2b = d2b * u * u
                    - 2.0 * dt * drift[0].signum() * raw_first * raw_first * u * u * u;
            }
            let d2s = spec.model.diffusion_hessian_at(t, x);
            let j0 = jmat[0];
            let ds = if additive { 0.0 } else { sig_jac[0] };
            *kval += (jac[0] * *kval + d2b * j0 * j0) * dt + (ds * *kval + d2s * j0 * j0) * db[0];
        }
        for i in 0..dd {
            jmat[i] += jtmp[i];
        }
        // State update with the tamed drift.
        tame(spec.model, dt, drift);
        let mut finite = true;
        for i in 0..d {
            let mut dx = drift[i] * dt;
            for j in 0..d {
                dx += sig[i * d + j] * db[j];
            }
            x[i] += dx;
            finite &= x[i].is_finite();
        }
        if !finite || jmat.iter().any(|v| !v.is_finite()) || !kval.is_finite() {
            return Err((k, t));
        }
        if rec < spec.plan.len() && spec.plan.steps[rec] == k + 1 {
            record(rec, x, jmat, *kval, out_x, out_j, &mut out_k);
            rec += 1;
        }
    }
    Ok(())
}

/// Earliest-path divergence error out of per-path outcomes.
fn first_divergence(
    results: Vec<std::result::Result<(), (usize, f64)>>,
) -> std::result::Result<(), DecayError> {
    for (path, r) in results.into_iter().enumerate() {
        if let Err((step, time)) = r {
            return Err(DecayError::SimulationDiverged { path, step, time });
        }
    }
    Ok(())
}

/// Simulate a bundle of trajectories per path, all driven by the same
/// Brownian increments. `inits` gives one starting point per trajectory;
/// the result has one ensemble per trajectory.
pub(crate) fn simulate_bundle(
    model: &CoefficientSet,
    grid: &TimeGrid,
    inits: &[Vec<f64>],
    n_paths: usize,
    seed: u64,
    stream: u64,
    record_at: &[f64],
) -> Result<Vec<PathEnsemble>> {
    if n_paths == 0 {
        return Err(DecayError::invalid("n_paths must be >= 1"));
    }
    if inits.is_empty() {
        return Err(DecayError::invalid("bundle needs at least one trajectory"));
    }
    let d = model.dim();
    for x in inits {
        if x.len() != d || x.iter().any(|v| !v.is_finite()) {
            return Err(DecayError::invalid(
                "initial condition must be finite with the model dimension",
            ));
        }
    }
    let spec = LegSpec::new(model, *grid, record_at)?;
    let n_rec = spec.plan.len();
    let stride = n_rec * d;
    let n_traj = inits.len();
    let mut buffers: Vec<Vec<f64>> = (0..n_traj).map(|_| vec![0.0; n_paths * stride]).collect();

    // Split every buffer into per-path slices, grouped by path.
    let mut per_path: Vec<Vec<&mut [f64]>> = Vec::with_capacity(n_paths);
    {
        let mut rests: Vec<&mut [f64]> = buffers.iter_mut().map(|b| b.as_mut_slice()).collect();
        for _ in 0..n_paths {
            let mut group = Vec::with_capacity(n_traj);
            let mut new_rests = Vec::with_capacity(n_traj);
            for rest in rests.into_iter() {
                let (head, tail) = rest.split_at_mut(stride);
                group.push(head);
                new_rests.push(tail);
            }
            per_path.push(group);
            rests = new_rests;
        }
    }

    let results: Vec<std::result::Result<(), (usize, f64)>> = per_path
        .into_par_iter()
        .enumerate()
        .map(|(p, mut outs)| {
            let mut rng = path_rng(seed, stream, p as u64);
            let mut states: Vec<Vec<f64>> = inits.to_vec();
            let mut scratch = Scratch::new(d);
            run_bundle_leg(&spec, &mut rng, &mut states, &mut outs, &mut scratch)
        })
        .collect();
    first_divergence(results)?;

    let times = spec.plan.times.clone();
    Ok(buffers
        .into_iter()
        .map(|states| PathEnsemble {
            n_paths,
            dim: d,
            times: times.clone(),
            states,
            seed,
            model_name: String::new(),
        })
        .collect())
}

pub(crate) fn simulate_paths_stream(
    model: &CoefficientSet,
    grid: &TimeGrid,
    init: &InitialCondition,
    n_paths: usize,
    seed: u64,
    stream: u64,
    record_at: &[f64],
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(DecayError::invalid("n_paths must be >= 1"));
    }
    let d = model.dim();
    let spec = LegSpec::new(model, *grid, record_at)?;
    let n_rec = spec.plan.len();
    let stride = n_rec * d;
    let mut states = vec![0.0; n_paths * stride];

    let outcomes: Vec<std::result::Result<(), (usize, f64)>> = states
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(p, out)| {
            let mut rng = path_rng(seed, stream, p as u64);
            let x = match init.draw(&mut rng, d) {
                Ok(x) => x,
                // Sampler produced a bad point; surface as divergence at step 0.
                Err(_) => return Err((usize::MAX, grid.t0())),
            };
            let mut bundle = [x];
            let mut outs = [out];
            let mut scratch = Scratch::new(d);
            run_bundle_leg(&spec, &mut rng, &mut bundle, &mut outs, &mut scratch)
        })
        .collect();
    // Distinguish sampler errors from divergence.
    for (path, r) in outcomes.iter().enumerate() {
        if let Err((step, _)) = r {
            if *step == usize::MAX {
                return Err(DecayError::invalid(format!(
                    "initial sampler produced an invalid state on path {path}"
                )));
            }
        }
    }
    first_divergence(outcomes)?;

    Ok(PathEnsemble {
        n_paths,
        dim: d,
        times: spec.plan.times.clone(),
        states,
        seed,
        model_name: String::new(),
    })
}

/// Euler-Maruyama ensemble of `n_paths` independent paths.
///
/// The update is X_{k+1} = X_k + b~ dt + sigma(t_k, X_k) dB_k with
/// dB_k ~ N(0, dt I) and b~ the tamed drift b / (1 + dt |b|) for
/// superlinear models.
pub fn simulate_paths(
    model: &CoefficientSet,
    grid: &TimeGrid,
    init: &InitialCondition,
    n_paths: usize,
    seed: u64,
    record_at: &[f64],
) -> Result<PathEnsemble> {
    simulate_paths_stream(model, grid, init, n_paths, seed, streams::MAIN, record_at)
}

pub(crate) fn simulate_with_tangent_stream(
    model: &CoefficientSet,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    stream: u64,
    record_at: &[f64],
    order: TangentOrder,
) -> Result<(PathEnsemble, TangentEnsemble)> {
    if n_paths == 0 {
        return Err(DecayError::invalid("n_paths must be >= 1"));
    }
    let d = model.dim();
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(DecayError::invalid(
            "initial condition must be finite with the model dimension",
        ));
    }
    if order == TangentOrder::Second && d != 1 {
        return Err(DecayError::capability(
            "second variation is implemented for d = 1 only",
        ));
    }
    let spec = LegSpec::new(model, *grid, record_at)?;
    let n_rec = spec.plan.len();
    let stride_x = n_rec * d;
    let stride_j = n_rec * d * d;
    let mut states = vec![0.0; n_paths * stride_x];
    let mut first = vec![0.0; n_paths * stride_j];
    let mut second = (order == TangentOrder::Second).then(|| vec![0.0; n_paths * n_rec]);

    let results: Vec<std::result::Result<(), (usize, f64)>> = match second.as_mut() {
        Some(second) => states
            .par_chunks_mut(stride_x)
            .zip(first.par_chunks_mut(stride_j))
            .zip(second.par_chunks_mut(n_rec))
            .enumerate()
            .map(|(p, ((out_x, out_j), out_k))| {
                run_one_tangent(&spec, seed, stream, p, x0, order, out_x, out_j, Some(out_k))
            })
            .collect(),
        None => states
            .par_chunks_mut(stride_x)
            .zip(first.par_chunks_mut(stride_j))
            .enumerate()
            .map(|(p, (out_x, out_j))| {
                run_one_tangent(&spec, seed, stream, p, x0, order, out_x, out_j, None)
            })
            .collect(),
    };
    first_divergence(results)?;

    let times = spec.plan.times.clone();
    Ok((
        PathEnsemble {
            n_paths,
            dim: d,
            times: times.clone(),
            states,
            seed,
            model_name: String::new(),
        },
        TangentEnsemble { n_paths, dim: d, times, first, second },
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_one_tangent(
    spec: &LegSpec<'_>,
    seed: u64,
    stream: u64,
    path: usize,
    x0: &[f64],
    order: TangentOrder,
    out_x: &mut [f64],
    out_j: &mut [f64],
    out_k: Option<&mut [f64]>,
) -> std::result::Result<(), (usize, f64)> {
    let d = spec.model.dim();
    let mut rng = path_rng(seed, stream, path as u64);
    let mut x = x0.to_vec();
    // J starts at the identity, K at zero.
    let mut jmat = vec![0.0; d * d];
    for i in 0..d {
        jmat[i * d + i] = 1.0;
    }
    let mut kval = 0.0;
    let mut scratch = Scratch::new(d);
    run_tangent_leg(
        spec, &mut rng, &mut x, &mut jmat, &mut kval, order, out_x, out_j, out_k, &mut scratch,
    )
}

/// Paths plus first (and for `TangentOrder::Second`, d = 1, second) variation
/// flows, driven by the same increments as the states.
pub fn simulate_with_tangent(
    model: &CoefficientSet,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    record_at: &[f64],
    order: TangentOrder,
) -> Result<(PathEnsemble, TangentEnsemble)> {
    simulate_with_tangent_stream(model, grid, x0, n_paths, seed, streams::MAIN, record_at, order)
}

/// Synchronous coupling: two ensembles driven per path by one Brownian path.
/// Each leg marginally matches `simulate_paths` with the same seed.
pub fn couple_paths(
    model: &CoefficientSet,
    grid: &TimeGrid,
    x: &[f64],
    y: &[f64],
    n_paths: usize,
    seed: u64,
    record_at: &[f64],
) -> Result<(PathEnsemble, PathEnsemble)> {
    let mut pair = simulate_bundle(
        model,
        grid,
        &[x.to_vec(), y.to_vec()],
        n_paths,
        seed,
        streams::MAIN,
        record_at,
    )?;
    let second = pair.pop().expect("bundle of two");
    let first = pair.pop().expect("bundle of two");
    Ok((first, second))
}

/// One sequential trajectory; `on_step(k, state)` runs after step k
/// completes. Used by the long-run invariant sampler.
pub(crate) fn sequential_trajectory(
    model: &CoefficientSet,
    t0: f64,
    dt: f64,
    n_steps: usize,
    x: &mut [f64],
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = model.dim();
    let sq_dt = dt.sqrt();
    let mut scratch = Scratch::new(d);
    let Scratch { drift, sigma, db, .. } = &mut scratch;
    for k in 0..n_steps {
        let t = t0 + k as f64 * dt;
        for v in db.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sq_dt * z;
        }
        model.drift_into(t, x, drift);
        tame(model, dt, drift);
        model.diffusion_into(t, x, sigma);
        let mut finite = true;
        for i in 0..d {
            let mut dx = drift[i] * dt;
            for j in 0..d {
                dx += sigma[i * d + j] * db[j];
            }
            x[i] += dx;
            finite &= x[i].is_finite();
        }
        if !finite {
            return Err(DecayError::SimulationDiverged { path: 0, step: k, time: t });
        }
        on_step(k, x);
    }
    Ok(())
}

/// Two-leg simulation through the intermediate time 1: from (tau, x) to 1,
/// then from each time-1 state to tau + s on a fresh noise stream. Records
/// terminal states only; in law this equals direct simulation to tau + s.
pub fn simulate_two_leg(
    model: &CoefficientSet,
    tau: f64,
    s: f64,
    x: &[f64],
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<PathEnsemble> {
    if !(0.0..=1.0).contains(&tau) || tau + s < 1.0 || s < 0.0 {
        return Err(DecayError::invalid(format!(
            "two-leg simulation needs tau <= 1 <= tau + s, got tau = {tau}, s = {s}"
        )));
    }
    if n_paths == 0 {
        return Err(DecayError::invalid("n_paths must be >= 1"));
    }
    let d = model.dim();
    if x.len() != d || x.iter().any(|v| !v.is_finite()) {
        return Err(DecayError::invalid(
            "initial condition must be finite with the model dimension",
        ));
    }
    let eps = 1e-12 * (1.0 + tau.abs() + s.abs());
    let leg1 = if 1.0 - tau > eps {
        Some(TimeGrid::fit(tau, 1.0, dt)?)
    } else {
        None
    };
    let leg2 = if tau + s - 1.0 > eps {
        Some(TimeGrid::fit(1.0, tau + s, dt)?)
    } else {
        None
    };
    let spec1 = leg1
        .map(|g| {
            let horizon = g.horizon();
            LegSpec::new(model, g, &[horizon])
        })
        .transpose()?;
    let spec2 = leg2
        .map(|g| {
            let horizon = g.horizon();
            LegSpec::new(model, g, &[horizon])
        })
        .transpose()?;

    let mut states = vec![0.0; n_paths * d];
    let results: Vec<std::result::Result<(), (usize, f64)>> = states
        .par_chunks_mut(d)
        .enumerate()
        .map(|(p, out)| {
            let mut scratch = Scratch::new(d);
            let mut bundle = [x.to_vec()];
            if let Some(spec) = &spec1 {
                let mut rng = path_rng(seed, streams::TWO_LEG_FIRST, p as u64);
                let mut tmp = vec![0.0; d];
                let mut outs = [tmp.as_mut_slice()];
                run_bundle_leg(spec, &mut rng, &mut bundle, &mut outs, &mut scratch)?;
            }
            if let Some(spec) = &spec2 {
                let mut rng = path_rng(seed, streams::TWO_LEG_SECOND, p as u64);
                let mut outs = [out];
                run_bundle_leg(spec, &mut rng, &mut bundle, &mut outs, &mut scratch)?;
            } else {
                out.copy_from_slice(&bundle[0]);
            }
            Ok(())
        })
        .collect();
    first_divergence(results)?;

    Ok(PathEnsemble {
        n_paths,
        dim: d,
        times: vec![tau + s],
        states,
        seed,
        model_name: String::new(),
    })
}
