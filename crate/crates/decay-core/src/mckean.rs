//! McKean-Vlasov support: interacting particle approximation of the law
//! flow, the frozen-law auxiliary coefficient set, and the consistency
//! checks between the two.
//!
//! The law flow is generated once per starting law and reused across every
//! Monte Carlo path of the auxiliary process; clouds are interpolated
//! piecewise-constantly in time (nearest recorded cloud).

use crate::error::{DecayError, Result};
use crate::lyapunov::check_monotonicity;
use crate::measures::{EmpiricalMeasure, MeasureMeta};
use crate::models::{CoefficientSet, Evaluator, ModelFlags};
use crate::rng::{path_rng, streams};
use crate::sensitivity::{
    report_from_cells, validate_envelope_inputs, DecayEnvelope, DecayReport, DerivOrder,
    TestFunction,
};
use crate::simulate::{
    simulate_paths_stream, simulate_with_tangent_stream, InitialCondition, TangentOrder, TimeGrid,
};
use crate::stats;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Read-only view of one particle cloud with its precomputed mean.
pub struct CloudStats<'a> {
    pub samples: &'a [f64],
    pub n: usize,
    pub dim: usize,
    pub mean: &'a [f64],
}

/// (x, cloud) -> values written into `out`.
pub type MvEvaluator = Arc<dyn Fn(&[f64], &CloudStats<'_>, &mut [f64]) + Send + Sync>;

#[derive(Clone, Copy, Debug)]
pub enum MvStructure {
    /// beta(x, mu) = -a x + c mean(mu).
    MeanFieldLinear { a: f64, c: f64 },
    General,
}

/// Measure-dependent coefficients for the McKean-Vlasov dynamics.
#[derive(Clone)]
pub struct MVCoefficientSet {
    dim: usize,
    drift_mv: MvEvaluator,
    diffusion_mv: MvEvaluator,
    pub structure: MvStructure,
}

impl MVCoefficientSet {
    pub fn new(
        dim: usize,
        drift_mv: MvEvaluator,
        diffusion_mv: MvEvaluator,
        structure: MvStructure,
    ) -> Self {
        assert!(dim >= 1);
        MVCoefficientSet { dim, drift_mv, diffusion_mv, structure }
    }

    /// Linear mean-field interaction with constant diagonal diffusion.
    pub fn mean_field_linear(a: f64, c: f64, sigma: f64, dim: usize) -> Self {
        let drift: MvEvaluator = Arc::new(move |x, cloud, out| {
            for i in 0..x.len() {
                out[i] = -a * x[i] + c * cloud.mean[i];
            }
        });
        let diffusion: MvEvaluator = Arc::new(move |_x, _cloud, out| {
            out.fill(0.0);
            let d = (out.len() as f64).sqrt() as usize;
            for i in 0..d {
                out[i * d + i] = sigma;
            }
        });
        MVCoefficientSet::new(dim, drift, diffusion, MvStructure::MeanFieldLinear { a, c })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_drift(&self, x: &[f64], cloud: &EmpiricalMeasure) -> Result<Vec<f64>> {
        if x.len() != self.dim || cloud.dim() != self.dim {
            return Err(DecayError::invalid("dimension mismatch"));
        }
        let mean = cloud.mean();
        let flat: Vec<f64> = (0..cloud.n()).flat_map(|i| cloud.sample(i).to_vec()).collect();
        let stats = CloudStats { samples: &flat, n: cloud.n(), dim: self.dim, mean: &mean };
        let mut out = vec![0.0; self.dim];
        (self.drift_mv)(x, &stats, &mut out);
        Ok(out)
    }
}

/// Recorded particle clouds over a time grid.
#[derive(Clone)]
pub struct LawFlow {
    times: Vec<f64>,
    /// clouds[k] is an N x d block.
    clouds: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    n_particles: usize,
    dim: usize,
    pub seed: u64,
}

impl LawFlow {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty flow")
    }

    /// Index of the recorded cloud nearest to t.
    pub fn nearest(&self, t: f64) -> usize {
        // Uniform grid: round; clamp to the recorded range.
        if self.times.len() == 1 {
            return 0;
        }
        let dt = self.times[1] - self.times[0];
        let k = ((t - self.times[0]) / dt).round();
        (k.max(0.0) as usize).min(self.times.len() - 1)
    }

    pub fn cloud_stats(&self, k: usize) -> CloudStats<'_> {
        CloudStats {
            samples: &self.clouds[k],
            n: self.n_particles,
            dim: self.dim,
            mean: &self.means[k],
        }
    }

    pub fn to_measure(&self, k: usize, model_name: &str) -> EmpiricalMeasure {
        EmpiricalMeasure::from_samples(
            self.clouds[k].clone(),
            self.dim,
            MeasureMeta { model: model_name.to_string(), time: self.times[k], seed: self.seed },
        )
        .expect("flow clouds are finite")
    }

    /// Exports cloud k in the measures CSV format (time in the sidecar).
    pub fn export_cloud(&self, k: usize, dir: &std::path::Path, stem: &str) -> Result<()> {
        self.to_measure(k, "law_flow").write_csv(dir, stem)
    }
}

/// Euler simulation of the N-particle system; every particle's coefficients
/// see the synchronous cloud of the previous step. Clouds are recorded at
/// every grid time.
pub fn simulate_particles(
    mv: &MVCoefficientSet,
    init: &InitialCondition,
    n_particles: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<LawFlow> {
    if n_particles < 2 {
        return Err(DecayError::invalid("particle system needs N >= 2"));
    }
    let d = mv.dim;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sq_dt = dt.sqrt();

    let mut rngs: Vec<_> =
        (0..n_particles).map(|i| path_rng(seed, streams::MAIN, i as u64)).collect();
    let mut current = vec![0.0; n_particles * d];
    for (i, rng) in rngs.iter_mut().enumerate() {
        let x = match init {
            InitialCondition::Point(p) => p.clone(),
            InitialCondition::Sampler(f) => f(rng),
        };
        if x.len() != d || x.iter().any(|v| !v.is_finite()) {
            return Err(DecayError::invalid(format!(
                "initial sampler produced an invalid state for particle {i}"
            )));
        }
        current[i * d..(i + 1) * d].copy_from_slice(&x);
    }

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut clouds = Vec::with_capacity(n_steps + 1);
    let mut means = Vec::with_capacity(n_steps + 1);
    let cloud_mean = |cloud: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..n_particles).map(|i| cloud[i * d + c]).collect();
                stats::mean(&col)
            })
            .collect()
    };
    times.push(grid.t0());
    clouds.push(current.clone());
    means.push(cloud_mean(&current));

    let mut next = vec![0.0; n_particles * d];
    for k in 0..n_steps {
        let mean = means.last().expect("recorded").clone();
        let stats_view = CloudStats { samples: &current, n: n_particles, dim: d, mean: &mean };
        let step_results: Vec<std::result::Result<(), usize>> = next
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map_init(
                || (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]),
                |(drift, sigma, db), (i, (slot, rng))| {
                    let x = &current[i * d..(i + 1) * d];
                    (mv.drift_mv)(x, &stats_view, drift);
                    (mv.diffusion_mv)(x, &stats_view, sigma);
                    for v in db.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = sq_dt * z;
                    }
                    let mut finite = true;
                    for r in 0..d {
                        let mut dx = drift[r] * dt;
                        for c in 0..d {
                            dx += sigma[r * d + c] * db[c];
                        }
                        slot[r] = x[r] + dx;
                        finite &= slot[r].is_finite();
                    }
                    if finite {
                        Ok(())
                    } else {
                        Err(i)
                    }
                },
            )
            .collect();
        for r in step_results {
            if let Err(i) = r {
                return Err(DecayError::SimulationDiverged {
                    path: i,
                    step: k,
                    time: grid.time_at(k),
                });
            }
        }
        std::mem::swap(&mut current, &mut next);
        times.push(grid.time_at(k + 1));
        clouds.push(current.clone());
        means.push(cloud_mean(&current));
    }

    Ok(LawFlow { times, clouds, means, n_particles, dim: d, seed })
}

/// Non-autonomous coefficient set obtained by substituting the recorded law
/// flow into the measure argument. The drift Jacobian in x is inherited from
/// the linear structure when available, otherwise by finite differences (the
/// cloud is constant with respect to x). Evaluation is only valid up to the
/// flow horizon.
pub fn freeze_law_flow(mv: &MVCoefficientSet, flow: &Arc<LawFlow>) -> Result<CoefficientSet> {
    if mv.dim != flow.dim() {
        return Err(DecayError::invalid("flow dimension does not match the coefficients"));
    }
    let d = mv.dim;
    let drift_mv = Arc::clone(&mv.drift_mv);
    let diffusion_mv = Arc::clone(&mv.diffusion_mv);
    let flow_d = Arc::clone(flow);
    let flow_s = Arc::clone(flow);
    let drift: Evaluator = Arc::new(move |t, x, out| {
        let k = flow_d.nearest(t);
        let stats = flow_d.cloud_stats(k);
        drift_mv(x, &stats, out);
    });
    let diffusion: Evaluator = Arc::new(move |t, x, out| {
        let k = flow_s.nearest(t);
        let stats = flow_s.cloud_stats(k);
        diffusion_mv(x, &stats, out);
    });
    let additive = matches!(mv.structure, MvStructure::MeanFieldLinear { .. });
    let flags = ModelFlags {
        time_homogeneous: false,
        additive_noise: additive,
        superlinear_drift: false,
    };
    let mut model = CoefficientSet::new(d, drift, diffusion, flags)
        .with_valid_horizon(flow.horizon());
    if let MvStructure::MeanFieldLinear { a, .. } = mv.structure {
        let jac: Evaluator = Arc::new(move |_t, _x, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = -a;
            }
        });
        model = model.with_drift_jacobian(jac);
        if d == 1 {
            model = model
                .with_drift_hessian(Arc::new(|_t, _x| 0.0))
                .with_diffusion_hessian(Arc::new(|_t, _x| 0.0));
        }
    }
    Ok(model)
}

/// Consistency report for the identity between the McKean-Vlasov dynamics
/// and its frozen-law auxiliary process started on the diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct MvConsistency {
    pub particle_mean: Vec<f64>,
    pub frozen_mean: Vec<f64>,
    pub mean_gap: Vec<f64>,
    pub mean_tol: Vec<f64>,
    pub var_gap: Vec<f64>,
    pub var_tol: Vec<f64>,
    pub ks: f64,
    pub ks_threshold: f64,
    /// O(1/N) widening applied to every threshold.
    pub allowance: f64,
    pub low_n_bias_flag: bool,
    pub pass: bool,
}

/// Compares the particle system's single-particle terminal marginal with the
/// frozen-law process started from the same point. Moments must agree within
/// combined 4-sigma plus a 1/N allowance; the KS statistic must stay under
/// the 1% threshold plus the same allowance.
#[allow(clippy::too_many_arguments)]
pub fn mv_consistency(
    mv: &MVCoefficientSet,
    x: &[f64],
    s: f64,
    n_particles: usize,
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<MvConsistency> {
    if s <= 0.0 {
        return Err(DecayError::invalid("s must be positive"));
    }
    let grid = TimeGrid::fit(0.0, s, dt)?;
    let flow = Arc::new(simulate_particles(
        mv,
        &InitialCondition::point(x),
        n_particles,
        &grid,
        seed,
    )?);
    let frozen = freeze_law_flow(mv, &flow)?;
    let ys = simulate_paths_stream(
        &frozen,
        &grid,
        &InitialCondition::point(x),
        n_paths,
        seed,
        streams::AUXILIARY,
        &[s],
    )?;
    let d = mv.dim;
    let terminal = flow.times().len() - 1;
    let allowance = 1.0 / n_particles as f64;

    let mut particle_mean = Vec::with_capacity(d);
    let mut frozen_mean = Vec::with_capacity(d);
    let mut mean_gap = Vec::with_capacity(d);
    let mut mean_tol = Vec::with_capacity(d);
    let mut var_gap = Vec::with_capacity(d);
    let mut var_tol = Vec::with_capacity(d);
    let mut moments_ok = true;
    let cloud = flow.cloud_stats(terminal);
    for c in 0..d {
        let pcol: Vec<f64> = (0..n_particles).map(|i| cloud.samples[i * d + c]).collect();
        let ycol = ys.coordinate_column(0, c);
        let (pm, pse) = stats::mean_stderr(&pcol);
        let (ym, yse) = stats::mean_stderr(&ycol);
        let (pv, pvse) = stats::variance_stderr(&pcol);
        let (yv, yvse) = stats::variance_stderr(&ycol);
        let gm = (pm - ym).abs();
        let tm = 4.0 * (pse * pse + yse * yse).sqrt() + allowance;
        let gv = (pv - yv).abs();
        let tv = 4.0 * (pvse * pvse + yvse * yvse).sqrt() + allowance;
        moments_ok &= gm <= tm && gv <= tv;
        particle_mean.push(pm);
        frozen_mean.push(ym);
        mean_gap.push(gm);
        mean_tol.push(tm);
        var_gap.push(gv);
        var_tol.push(tv);
    }
    let mut ks: f64 = 0.0;
    for c in 0..d {
        let pcol: Vec<f64> = (0..n_particles).map(|i| cloud.samples[i * d + c]).collect();
        let ycol = ys.coordinate_column(0, c);
        ks = ks.max(stats::ks_statistic(&pcol, &ycol));
    }
    let ks_threshold = stats::ks_threshold_1pct(n_particles, n_paths) + allowance;
    let pass = moments_ok && ks <= ks_threshold;
    Ok(MvConsistency {
        particle_mean,
        frozen_mean,
        mean_gap,
        mean_tol,
        var_gap,
        var_tol,
        ks,
        ks_threshold,
        allowance,
        low_n_bias_flag: n_particles < 100,
        pass,
    })
}

/// Envelope check for the frozen-law derivative (the d/dy term of the
/// McKean-Vlasov derivative split): for each x in the grid the law flow is
/// regenerated from the point mass at x, the coefficients are frozen, and
/// the pathwise derivative of the auxiliary process is estimated at y = x.
#[allow(clippy::too_many_arguments)]
pub fn mv_derivative_decay(
    mv: &MVCoefficientSet,
    x_grid: &[Vec<f64>],
    times: &[f64],
    phi: &TestFunction,
    order: DerivOrder,
    n_particles: usize,
    n_paths: usize,
    seed: u64,
    dt: f64,
    envelope: &DecayEnvelope,
    tolerance: f64,
) -> Result<DecayReport> {
    validate_envelope_inputs(x_grid, times)?;
    let horizon = times.last().copied().unwrap();
    let grid = TimeGrid::fit(0.0, horizon, dt)?;
    let tangent_order = match order {
        DerivOrder::First => TangentOrder::First,
        DerivOrder::Second => TangentOrder::Second,
    };
    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(x_grid.len()); times.len()];
    for x in x_grid {
        let flow = Arc::new(simulate_particles(
            mv,
            &InitialCondition::point(x),
            n_particles,
            &grid,
            seed,
        )?);
        let frozen = freeze_law_flow(mv, &flow)?;
        let (paths, tangent) = simulate_with_tangent_stream(
            &frozen,
            &grid,
            x,
            n_paths,
            seed,
            streams::AUXILIARY,
            times,
            tangent_order,
        )?;
        for (si, _) in times.iter().enumerate() {
            let est = crate::sensitivity::pathwise_cell(phi, &paths, &tangent, si, order)?;
            cells[si].push(est);
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

/// Measured monotonicity constant of a frozen flow (diagnostic oracle for
/// the decay rate of the frozen derivative).
pub fn frozen_monotonicity(
    mv: &MVCoefficientSet,
    x: &[f64],
    horizon: f64,
    n_particles: usize,
    seed: u64,
    dt: f64,
) -> Result<f64> {
    let grid = TimeGrid::fit(0.0, horizon, dt)?;
    let flow = Arc::new(simulate_particles(
        mv,
        &InitialCondition::point(x),
        n_particles,
        &grid,
        seed,
    )?);
    let frozen = freeze_law_flow(mv, &flow)?;
    let check = check_monotonicity(&frozen, 2, (0.0, horizon), (-5.0, 5.0), 5_000, seed)?;
    Ok(check.m1_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ou_model;

    #[test]
    fn no_interaction_particles_are_iid_ou() {
        let mv = MVCoefficientSet::mean_field_linear(1.0, 0.0, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
        let n = 10_000;
        let flow =
            simulate_particles(&mv, &InitialCondition::point(&[0.0]), n, &grid, 7).unwrap();
        let terminal = flow.times().len() - 1;
        let cloud = flow.cloud_stats(terminal);
        let col: Vec<f64> = (0..n).map(|i| cloud.samples[i]).collect();
        let (var, var_se) = stats::variance_stderr(&col);
        let expected = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!(
            (var - expected).abs() <= 4.0 * var_se + 1e-3,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn zero_start_no_noise_is_fixed_point() {
        let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 0.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
        let flow =
            simulate_particles(&mv, &InitialCondition::point(&[0.0]), 16, &grid, 7).unwrap();
        for k in 0..flow.times().len() {
            let cloud = flow.cloud_stats(k);
            assert!(cloud.samples.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn interacting_cloud_mean_follows_ode() {
        // m' = -(a - c) m, m(0) = 1.
        let (a, c) = (2.0, 0.5);
        let mv = MVCoefficientSet::mean_field_linear(a, c, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-3).unwrap();
        let n = 10_000;
        let flow =
            simulate_particles(&mv, &InitialCondition::point(&[1.0]), n, &grid, 7).unwrap();
        let terminal = flow.times().len() - 1;
        let cloud = flow.cloud_stats(terminal);
        let col: Vec<f64> = (0..n).map(|i| cloud.samples[i]).collect();
        let (mean, se) = stats::mean_stderr(&col);
        let expected = (-(a - c) * 1.0f64).exp();
        assert!(
            (mean - expected).abs() <= 4.0 * se + 1e-3,
            "mean {mean} vs {expected} (se {se})"
        );
    }

    #[test]
    fn flow_is_bit_reproducible() {
        let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 1.0, 1);
        let grid = TimeGrid::new(0.0, 0.5, 1e-2).unwrap();
        let run = |workers: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| {
                simulate_particles(&mv, &InitialCondition::point(&[1.0]), 500, &grid, 11).unwrap()
            })
        };
        let a = run(1);
        let b = run(8);
        for k in 0..a.times().len() {
            assert_eq!(a.cloud_stats(k).samples, b.cloud_stats(k).samples);
        }
    }

    #[test]
    fn frozen_no_interaction_matches_autonomous_drift_exactly() {
        let mv = MVCoefficientSet::mean_field_linear(1.5, 0.0, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
        let flow = Arc::new(
            simulate_particles(&mv, &InitialCondition::point(&[0.7]), 64, &grid, 3).unwrap(),
        );
        let frozen = freeze_law_flow(&mv, &flow).unwrap();
        let reference = ou_model(1.5, 1.0, 1);
        for &t in &[0.0, 0.3, 0.9] {
            for &x in &[-1.0, 0.0, 2.0] {
                assert_eq!(
                    frozen.eval_drift(t, &[x]).unwrap(),
                    reference.eval_drift(t, &[x]).unwrap()
                );
            }
        }
    }

    #[test]
    fn frozen_linear_drift_tracks_mean_flow() {
        let (a, c) = (2.0, 0.5);
        let mv = MVCoefficientSet::mean_field_linear(a, c, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-3).unwrap();
        let flow = Arc::new(
            simulate_particles(&mv, &InitialCondition::point(&[1.0]), 20_000, &grid, 3).unwrap(),
        );
        let frozen = freeze_law_flow(&mv, &flow).unwrap();
        for &t in &[0.0, 0.5, 1.0] {
            let got = frozen.eval_drift(t, &[0.4]).unwrap()[0];
            let want = -a * 0.4 + c * (-(a - c) * t).exp();
            assert!((got - want).abs() < 0.05, "t = {t}: {got} vs {want}");
        }
    }

    #[test]
    fn frozen_rejects_time_past_horizon() {
        let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
        let flow = Arc::new(
            simulate_particles(&mv, &InitialCondition::point(&[1.0]), 32, &grid, 3).unwrap(),
        );
        let frozen = freeze_law_flow(&mv, &flow).unwrap();
        let bad_grid = TimeGrid::new(0.0, 2.0, 1e-2).unwrap();
        let err = simulate_paths_stream(
            &frozen,
            &bad_grid,
            &InitialCondition::point(&[1.0]),
            4,
            1,
            streams::MAIN,
            &[2.0],
        );
        assert!(matches!(err, Err(DecayError::InvalidArgument(_))));
    }

    #[test]
    fn frozen_jacobian_is_cloud_independent() {
        let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 1.0, 1);
        let grid = TimeGrid::new(0.0, 1.0, 1e-2).unwrap();
        let mut jacs = Vec::new();
        for seed in [1, 2] {
            let flow = Arc::new(
                simulate_particles(&mv, &InitialCondition::point(&[1.0]), 64, &grid, seed)
                    .unwrap(),
            );
            let frozen = freeze_law_flow(&mv, &flow).unwrap();
            let mut j = [0.0];
            frozen.drift_jacobian_into(0.5, &[0.3], &mut j);
            jacs.push(j[0]);
        }
        assert_eq!(jacs[0], jacs[1]);
        assert_eq!(jacs[0], -2.0);
    }

    #[test]
    fn consistency_no_interaction_passes() {
        let mv = MVCoefficientSet::mean_field_linear(1.0, 0.0, 1.0, 1);
        let r = mv_consistency(&mv, &[1.0], 1.0, 2000, 4000, 5, 1e-2).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(!r.low_n_bias_flag);
    }

    #[test]
    fn consistency_small_n_widens_and_flags() {
        let mv = MVCoefficientSet::mean_field_linear(1.0, 0.0, 1.0, 1);
        let r = mv_consistency(&mv, &[1.0], 0.5, 2, 500, 5, 1e-2).unwrap();
        assert!(r.low_n_bias_flag);
        assert_eq!(r.allowance, 0.5);
        assert!(r.ks_threshold > 0.5);
    }

    #[test]
    fn frozen_monotonicity_equals_a() {
        let mv = MVCoefficientSet::mean_field_linear(2.0, 0.5, 1.0, 1);
        let m1 = frozen_monotonicity(&mv, &[1.0], 1.0, 256, 3, 1e-2).unwrap();
        assert!((m1 - 2.0).abs() < 1e-9, "m1 = {m1}");
    }
}
