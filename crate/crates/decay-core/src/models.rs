//! SDE coefficient sets and the model catalog.
//!
//! A [`CoefficientSet`] packages the drift b(t, x), the diffusion sigma(t, x)
//! and (optionally) their space derivatives behind thread-safe evaluators.
//! Matrices are row-major dense d x d with d expected small (1-3). Missing
//! analytic derivatives fall back to central finite differences so that the
//! tangent process is available for every model.

use crate::error::{DecayError, Result};
use std::collections::BTreeMap;
use std::sync::Arc;

/// (t, x) -> values written into `out`.
pub type Evaluator = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// (t, x) -> scalar; used for the d = 1 second derivatives.
pub type ScalarEvaluator = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// x -> values written into `out`; used for the limiting coefficients.
pub type LimitEvaluator = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Structural flags that steer the simulation kernels.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelFlags {
    /// Coefficients do not depend on t.
    pub time_homogeneous: bool,
    /// sigma does not depend on x (it may still depend on t).
    pub additive_noise: bool,
    /// Drift grows superlinearly; the Euler scheme tames it.
    pub superlinear_drift: bool,
}

/// A scalar function with the derivatives the generator needs.
pub trait C2Scalar {
    fn value(&self, x: &[f64]) -> f64;
    /// Gradient, length d; `None` when unavailable.
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>>;
    /// Hessian, row-major d x d; `None` when unavailable.
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>>;
}

/// Closure-backed [`C2Scalar`] for ad-hoc test functions.
#[derive(Clone)]
pub struct SimpleC2 {
    pub eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    pub hess: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
}

impl C2Scalar for SimpleC2 {
    fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g(x))
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.hess.as_ref().map(|h| h(x))
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    drift: Evaluator,
    diffusion: Evaluator,
    drift_jacobian: Option<Evaluator>,
    drift_hessian: Option<ScalarEvaluator>,
    diffusion_jacobian: Option<Evaluator>,
    diffusion_hessian: Option<ScalarEvaluator>,
    limiting: Option<(LimitEvaluator, LimitEvaluator)>,
    pub flags: ModelFlags,
    /// Evaluators backed by a finite law flow are only valid up to here.
    valid_horizon: Option<f64>,
}

fn check_point(t: f64, x: &[f64], dim: usize) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(DecayError::invalid(format!("time must be finite and >= 0, got {t}")));
    }
    if x.len() != dim {
        return Err(DecayError::invalid(format!(
            "state has dimension {}, model expects {}",
            x.len(),
            dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DecayError::invalid("state has non-finite coordinates"));
    }
    Ok(())
}

impl CoefficientSet {
    pub fn new(dim: usize, drift: Evaluator, diffusion: Evaluator, flags: ModelFlags) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        CoefficientSet {
            dim,
            drift,
            diffusion,
            drift_jacobian: None,
            drift_hessian: None,
            diffusion_jacobian: None,
            diffusion_hessian: None,
            limiting: None,
            flags,
            valid_horizon: None,
        }
    }

    pub fn with_drift_jacobian(mut self, jac: Evaluator) -> Self {
        self.drift_jacobian = Some(jac);
        self
    }

    /// d = 1 only.
    pub fn with_drift_hessian(mut self, hess: ScalarEvaluator) -> Self {
        assert_eq!(self.dim, 1, "drift hessian evaluator is d = 1 only");
        self.drift_hessian = Some(hess);
        self
    }

    /// Row-major d x d x d tensor, `[(i*d + j)*d + l] = d sigma_ij / d x_l`.
    pub fn with_diffusion_jacobian(mut self, jac: Evaluator) -> Self {
        self.diffusion_jacobian = Some(jac);
        self
    }

    /// d = 1 only.
    pub fn with_diffusion_hessian(mut self, hess: ScalarEvaluator) -> Self {
        assert_eq!(self.dim, 1, "diffusion hessian evaluator is d = 1 only");
        self.diffusion_hessian = Some(hess);
        self
    }

    pub fn with_limiting(mut self, drift_inf: LimitEvaluator, diffusion_inf: LimitEvaluator) -> Self {
        self.limiting = Some((drift_inf, diffusion_inf));
        self
    }

    pub(crate) fn with_valid_horizon(mut self, horizon: f64) -> Self {
        self.valid_horizon = Some(horizon);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_limiting(&self) -> bool {
        self.limiting.is_some()
    }

    pub fn valid_horizon(&self) -> Option<f64> {
        self.valid_horizon
    }

    /// b(t, x), validated.
    pub fn eval_drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_point(t, x, self.dim)?;
        let mut out = vec![0.0; self.dim];
        (self.drift)(t, x, &mut out);
        Ok(out)
    }

    /// sigma(t, x), row-major d x d, validated.
    pub fn eval_diffusion(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_point(t, x, self.dim)?;
        let mut out = vec![0.0; self.dim * self.dim];
        (self.diffusion)(t, x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out);
    }

    #[inline]
    pub(crate) fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out);
    }

    pub fn has_analytic_drift_jacobian(&self) -> bool {
        self.drift_jacobian.is_some()
    }

    /// Jacobian of the drift, analytic when registered, otherwise central
    /// finite differences with step 1e-5 * (1 + |x_l|) per coordinate.
    pub fn drift_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift_jacobian {
            Some(jac) => jac(t, x, out),
            None => self.fd_jacobian(&self.drift, t, x, out, 1e-5),
        }
    }

    /// d^2 b / dx^2 in d = 1.
    pub fn drift_hessian_at(&self, t: f64, x: &[f64]) -> f64 {
        debug_assert_eq!(self.dim, 1);
        if let Some(h) = &self.drift_hessian {
            return h(t, x);
        }
        if let Some(jac) = &self.drift_jacobian {
            return self.fd_scalar_derivative(|t, x, out| jac(t, x, out), t, x, 1e-5);
        }
        self.fd_second_difference(&self.drift, t, x)
    }

    pub fn diffusion_jacobian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if self.flags.additive_noise {
            out.fill(0.0);
            return;
        }
        match &self.diffusion_jacobian {
            Some(jac) => jac(t, x, out),
            None => self.fd_tensor_jacobian(t, x, out, 1e-5),
        }
    }

    /// d^2 sigma / dx^2 in d = 1.
    pub fn diffusion_hessian_at(&self, t: f64, x: &[f64]) -> f64 {
        debug_assert_eq!(self.dim, 1);
        if self.flags.additive_noise {
            return 0.0;
        }
        if let Some(h) = &self.diffusion_hessian {
            return h(t, x);
        }
        if let Some(jac) = &self.diffusion_jacobian {
            return self.fd_scalar_derivative(|t, x, out| jac(t, x, out), t, x, 1e-5);
        }
        self.fd_second_difference(&self.diffusion, t, x)
    }

    fn fd_jacobian<F>(&self, f: &Arc<F>, t: f64, x: &[f64], out: &mut [f64], rel: f64)
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + ?Sized,
    {
        let d = self.dim;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for l in 0..d {
            let h = rel * (1.0 + x[l].abs());
            xp[l] = x[l] + h;
            f(t, &xp, &mut fp);
            xp[l] = x[l] - h;
            f(t, &xp, &mut fm);
            xp[l] = x[l];
            for i in 0..d {
                out[i * d + l] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    fn fd_tensor_jacobian(&self, t: f64, x: &[f64], out: &mut [f64], rel: f64) {
        let d = self.dim;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d * d];
        let mut fm = vec![0.0; d * d];
        for l in 0..d {
            let h = rel * (1.0 + x[l].abs());
            xp[l] = x[l] + h;
            (self.diffusion)(t, &xp, &mut fp);
            xp[l] = x[l] - h;
            (self.diffusion)(t, &xp, &mut fm);
            xp[l] = x[l];
            for ij in 0..d * d {
                out[ij * d + l] = (fp[ij] - fm[ij]) / (2.0 * h);
            }
        }
    }

    /// First central difference of a scalar-valued map (d = 1).
    fn fd_scalar_derivative<F>(&self, f: F, t: f64, x: &[f64], rel: f64) -> f64
    where
        F: Fn(f64, &[f64], &mut [f64]),
    {
        let h = rel * (1.0 + x[0].abs());
        let mut v = [0.0];
        f(t, &[x[0] + h], &mut v);
        let plus = v[0];
        f(t, &[x[0] - h], &mut v);
        (plus - v[0]) / (2.0 * h)
    }

    /// Second central difference of the raw evaluator (d = 1); used only when
    /// neither a hessian nor a jacobian is registered.
    fn fd_second_difference(&self, f: &Evaluator, t: f64, x: &[f64]) -> f64 {
        let h = 1e-4 * (1.0 + x[0].abs());
        let mut v = [0.0];
        f(t, &[x[0] + h], &mut v);
        let plus = v[0];
        f(t, x, &mut v);
        let mid = v[0];
        f(t, &[x[0] - h], &mut v);
        (plus - 2.0 * mid + v[0]) / (h * h)
    }

    /// L f (t, x) = 1/2 tr(sigma sigma^T Hess f) + b . grad f.
    pub fn apply_generator(&self, t: f64, x: &[f64], f: &dyn C2Scalar) -> Result<f64> {
        check_point(t, x, self.dim)?;
        let d = self.dim;
        let grad = f
            .gradient(x)
            .ok_or_else(|| DecayError::capability("generator needs a gradient evaluator"))?;
        let hess = f
            .hessian(x)
            .ok_or_else(|| DecayError::capability("generator needs a hessian evaluator"))?;
        if grad.len() != d || hess.len() != d * d {
            return Err(DecayError::invalid("derivative evaluators have wrong dimensions"));
        }
        let b = self.eval_drift(t, x)?;
        let sigma = self.eval_diffusion(t, x)?;
        let mut first_order = 0.0;
        for i in 0..d {
            first_order += b[i] * grad[i];
        }
        // tr(sigma sigma^T H) = sum_j col_j(sigma)^T H col_j(sigma)
        let mut second_order = 0.0;
        for j in 0..d {
            for i in 0..d {
                for k in 0..d {
                    second_order += sigma[i * d + j] * hess[i * d + k] * sigma[k * d + j];
                }
            }
        }
        Ok(0.5 * second_order + first_order)
    }

    /// The autonomous model (b_inf, sigma_inf) this one decays to.
    pub fn limiting_model(&self) -> Result<CoefficientSet> {
        let (b_inf, s_inf) = self
            .limiting
            .as_ref()
            .ok_or_else(|| DecayError::capability("model declares no limiting coefficients"))?;
        let (b_inf, s_inf) = (Arc::clone(b_inf), Arc::clone(s_inf));
        let b2 = Arc::clone(&b_inf);
        let s2 = Arc::clone(&s_inf);
        let flags = ModelFlags {
            time_homogeneous: true,
            additive_noise: self.flags.additive_noise,
            superlinear_drift: self.flags.superlinear_drift,
        };
        let mut model = CoefficientSet::new(
            self.dim,
            Arc::new(move |_t, x, out| b_inf(x, out)),
            Arc::new(move |_t, x, out| s_inf(x, out)),
            flags,
        )
        .with_limiting(b2.clone(), s2.clone());
        // The limit of an autonomous map is itself; derivatives fall back to
        // finite differences unless re-registered by the catalog builders.
        model.valid_horizon = None;
        Ok(model)
    }
}

/// Constant diagonal diffusion sigma * I.
fn constant_diagonal_diffusion(dim: usize, sigma: f64) -> Evaluator {
    Arc::new(move |_t, _x, out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..dim {
            out[i * dim + i] = sigma;
        }
    })
}

/// One catalog model with its claimed constants.
#[derive(Clone)]
pub struct ModelCatalogEntry {
    pub name: String,
    pub coefficients: CoefficientSet,
    /// Contraction rate the model is claimed to satisfy (monotonicity
    /// normalization).
    pub claimed_m1: Option<f64>,
    /// Reference rates to print next to measured ones. The switching model
    /// carries both 0.7 and 2 * 0.7 since its two-point and one-sided
    /// normalizations differ by the usual factor of two.
    pub reference_rates: Vec<f64>,
    pub params: BTreeMap<String, f64>,
    pub notes: String,
}

pub fn ou_model(m1: f64, sigma: f64, dim: usize) -> CoefficientSet {
    let drift: Evaluator = Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -m1 * xi;
        }
    });
    let jac: Evaluator = Arc::new(move |_t, _x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..dim {
            out[i * dim + i] = -m1;
        }
    });
    let flags = ModelFlags {
        time_homogeneous: true,
        additive_noise: true,
        superlinear_drift: false,
    };
    let mut model = CoefficientSet::new(dim, drift, constant_diagonal_diffusion(dim, sigma), flags)
        .with_drift_jacobian(jac)
        .with_limiting(
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -m1 * xi;
                }
            }),
            Arc::new(move |_x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = sigma;
                }
            }),
        );
    if dim == 1 {
        model = model
            .with_drift_hessian(Arc::new(|_t, _x| 0.0))
            .with_diffusion_hessian(Arc::new(|_t, _x| 0.0));
    }
    model
}

pub fn sine_model(m1: f64, sigma: f64) -> CoefficientSet {
    let drift: Evaluator = Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
        out[0] = x[0].sin() - (m1 + 1.0) * x[0];
    });
    let jac: Evaluator = Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
        out[0] = x[0].cos() - (m1 + 1.0);
    });
    let hess: ScalarEvaluator = Arc::new(|_t, x: &[f64]| -x[0].sin());
    let flags = ModelFlags {
        time_homogeneous: true,
        additive_noise: true,
        superlinear_drift: false,
    };
    CoefficientSet::new(1, drift, constant_diagonal_diffusion(1, sigma), flags)
        .with_drift_jacobian(jac)
        .with_drift_hessian(hess)
        .with_diffusion_hessian(Arc::new(|_t, _x| 0.0))
        .with_limiting(
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin() - (m1 + 1.0) * x[0];
            }),
            Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = sigma),
        )
}

/// Exponent of the switching drift, clamped before exponentiation so the
/// evaluator stays a total function. The clamp region sits far outside the
/// state range the contractive dynamics visit.
const EXP_CLAMP: f64 = 700.0;

fn switching_exponent(t: f64, x: f64) -> (f64, bool) {
    let g = -t * x + 10.0 * (t - 0.9) * x * x - 100.0 * (1.0 - t) * x * x;
    let clamped = !(-EXP_CLAMP..=EXP_CLAMP).contains(&g);
    (g.clamp(-EXP_CLAMP, EXP_CLAMP), clamped)
}

pub fn switching_model(sigma: f64) -> CoefficientSet {
    let drift: Evaluator = Arc::new(|t, x: &[f64], out: &mut [f64]| {
        let (g, _) = switching_exponent(t, x[0]);
        out[0] = -x[0] * g.exp();
    });
    let jac: Evaluator = Arc::new(|t, x: &[f64], out: &mut [f64]| {
        let (g, clamped) = switching_exponent(t, x[0]);
        let e = g.exp();
        if clamped {
            // Inside the clamp plateau the exponential is constant in x.
            out[0] = -e;
        } else {
            let gp = -t + 20.0 * (t - 0.9) * x[0] - 200.0 * (1.0 - t) * x[0];
            out[0] = -e * (1.0 + x[0] * gp);
        }
    });
    let hess: ScalarEvaluator = Arc::new(|t, x: &[f64]| {
        let (g, clamped) = switching_exponent(t, x[0]);
        if clamped {
            return 0.0;
        }
        let e = g.exp();
        let gp = -t + 20.0 * (t - 0.9) * x[0] - 200.0 * (1.0 - t) * x[0];
        let gpp = 20.0 * (t - 0.9) - 200.0 * (1.0 - t);
        -e * (gp * (1.0 + x[0] * gp) + 2.0 * gp + x[0] * gpp)
    });
    let flags = ModelFlags {
        time_homogeneous: false,
        additive_noise: true,
        superlinear_drift: true,
    };
    CoefficientSet::new(1, drift, constant_diagonal_diffusion(1, sigma), flags)
        .with_drift_jacobian(jac)
        .with_drift_hessian(hess)
        .with_diffusion_hessian(Arc::new(|_t, _x| 0.0))
}

/// Frozen-law form of the linear mean-field model: the interaction term is
/// replaced by the closed-form mean flow m0 exp(-(a - c) t), which is what
/// freezing the law of the linear McKean-Vlasov dynamics produces.
pub fn mv_frozen_linear_model(a: f64, c: f64, m0: f64, sigma: f64) -> CoefficientSet {
    let mean_flow = move |t: f64| m0 * (-(a - c) * t).exp();
    let drift: Evaluator = Arc::new(move |t, x: &[f64], out: &mut [f64]| {
        out[0] = -a * x[0] + c * mean_flow(t);
    });
    let jac: Evaluator = Arc::new(move |_t, _x: &[f64], out: &mut [f64]| out[0] = -a);
    let flags = ModelFlags {
        time_homogeneous: c == 0.0 || m0 == 0.0,
        additive_noise: true,
        superlinear_drift: false,
    };
    CoefficientSet::new(1, drift, constant_diagonal_diffusion(1, sigma), flags)
        .with_drift_jacobian(jac)
        .with_drift_hessian(Arc::new(|_t, _x| 0.0))
        .with_diffusion_hessian(Arc::new(|_t, _x| 0.0))
        .with_limiting(
            Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = -a * x[0]),
            Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = sigma),
        )
}

/// Mean reversion relaxing from rate 2 at t = 0 to rate 1: b(t, x) = -x (1 + e^-t).
pub fn ou_relax_model(sigma: f64) -> CoefficientSet {
    let drift: Evaluator = Arc::new(|t, x: &[f64], out: &mut [f64]| {
        out[0] = -x[0] * (1.0 + (-t).exp());
    });
    let jac: Evaluator = Arc::new(|t, _x: &[f64], out: &mut [f64]| {
        out[0] = -(1.0 + (-t).exp());
    });
    let flags = ModelFlags {
        time_homogeneous: false,
        additive_noise: true,
        superlinear_drift: false,
    };
    CoefficientSet::new(1, drift, constant_diagonal_diffusion(1, sigma), flags)
        .with_drift_jacobian(jac)
        .with_drift_hessian(Arc::new(|_t, _x| 0.0))
        .with_diffusion_hessian(Arc::new(|_t, _x| 0.0))
        .with_limiting(
            Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -x[0]),
            Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = sigma),
        )
}

type EntryBuilder = Arc<dyn Fn(&BTreeMap<String, f64>) -> Result<ModelCatalogEntry> + Send + Sync>;

/// Name-keyed registry of model builders. The built-in catalog is always
/// present; user models register a builder under a fresh name.
pub struct ModelRegistry {
    builders: BTreeMap<String, EntryBuilder>,
}

fn get_param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn reject_unknown(params: &BTreeMap<String, f64>, allowed: &[&str], model: &str) -> Result<()> {
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(DecayError::invalid(format!(
                "model '{model}' does not accept parameter '{key}' (allowed: {allowed:?})"
            )));
        }
    }
    Ok(())
}

impl ModelRegistry {
    /// Registry preloaded with the built-in catalog.
    pub fn with_catalog() -> Self {
        let mut reg = ModelRegistry { builders: BTreeMap::new() };

        reg.register("ou", |params| {
            reject_unknown(params, &["M1", "sigma", "dim"], "ou")?;
            let m1 = get_param(params, "M1", 1.0);
            let sigma = get_param(params, "sigma", 1.0);
            let dim = get_param(params, "dim", 1.0) as usize;
            if m1 <= 0.0 {
                return Err(DecayError::invalid("ou requires M1 > 0"));
            }
            if dim == 0 {
                return Err(DecayError::invalid("ou requires dim >= 1"));
            }
            Ok(ModelCatalogEntry {
                name: "ou".into(),
                coefficients: ou_model(m1, sigma, dim),
                claimed_m1: Some(m1),
                reference_rates: vec![m1],
                params: BTreeMap::from([
                    ("M1".into(), m1),
                    ("sigma".into(), sigma),
                    ("dim".into(), dim as f64),
                ]),
                notes: "linear mean reversion; dissipativity (W = |x|^2) at rate 2 M1, \
                        monotonicity (m = 2) at rate M1; autonomous with itself as limit"
                    .into(),
            })
        });

        reg.register("sine", |params| {
            reject_unknown(params, &["M1", "sigma"], "sine")?;
            let m1 = get_param(params, "M1", 1.0);
            let sigma = get_param(params, "sigma", 1.0);
            if m1 <= 0.0 {
                return Err(DecayError::invalid("sine requires M1 > 0"));
            }
            Ok(ModelCatalogEntry {
                name: "sine".into(),
                coefficients: sine_model(m1, sigma),
                claimed_m1: Some(m1),
                reference_rates: vec![m1],
                params: BTreeMap::from([("M1".into(), m1), ("sigma".into(), sigma)]),
                notes: "d = 1 drift sin(x) - (M1 + 1) x; mean value theorem gives the \
                        two-point contraction at rate 2 M1 for W = x^2"
                    .into(),
            })
        });

        reg.register("switching", |params| {
            reject_unknown(params, &["sigma"], "switching")?;
            let sigma = get_param(params, "sigma", 1.0);
            Ok(ModelCatalogEntry {
                name: "switching".into(),
                coefficients: switching_model(sigma),
                claimed_m1: Some(0.7),
                // Both normalizations are reported: 0.7 one-sided, 1.4 for the
                // two-point W = x^2 ratio.
                reference_rates: vec![0.7, 1.4],
                params: BTreeMap::from([("sigma".into(), sigma)]),
                notes: "time switches the drift from bounded to linear decay; the drift \
                        slope stays <= -0.7 for t >= 1; exponent clamped to +-700"
                    .into(),
            })
        });

        reg.register("mv_frozen_linear", |params| {
            reject_unknown(params, &["a", "c", "m0", "sigma"], "mv_frozen_linear")?;
            let a = get_param(params, "a", 2.0);
            let c = get_param(params, "c", 0.5);
            let m0 = get_param(params, "m0", 1.0);
            let sigma = get_param(params, "sigma", 1.0);
            if a <= c {
                return Err(DecayError::invalid("mv_frozen_linear requires a > c"));
            }
            Ok(ModelCatalogEntry {
                name: "mv_frozen_linear".into(),
                coefficients: mv_frozen_linear_model(a, c, m0, sigma),
                claimed_m1: Some(a),
                reference_rates: vec![a, a - c],
                params: BTreeMap::from([
                    ("a".into(), a),
                    ("c".into(), c),
                    ("m0".into(), m0),
                    ("sigma".into(), sigma),
                ]),
                notes: "linear mean-field drift with the law frozen to its closed-form \
                        mean flow m0 exp(-(a - c) t); monotone at rate a, mean decays \
                        at rate a - c"
                    .into(),
            })
        });

        reg.register("ou_relax", |params| {
            reject_unknown(params, &["sigma"], "ou_relax")?;
            let sigma = get_param(params, "sigma", 1.0);
            Ok(ModelCatalogEntry {
                name: "ou_relax".into(),
                coefficients: ou_relax_model(sigma),
                claimed_m1: Some(1.0),
                reference_rates: vec![1.0, 2.0],
                params: BTreeMap::from([("sigma".into(), sigma)]),
                notes: "drift -x (1 + e^-t) relaxing to -x; declared limit model is the \
                        unit-rate OU; with sigma = 0 the drift condition L W <= -2 W \
                        holds for W = x^2"
                    .into(),
            })
        });

        reg
    }

    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&BTreeMap<String, f64>) -> Result<ModelCatalogEntry> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_string(), Arc::new(builder));
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn build(&self, name: &str, params: &BTreeMap<String, f64>) -> Result<ModelCatalogEntry> {
        let builder = self.builders.get(name).ok_or_else(|| {
            DecayError::invalid(format!(
                "unknown model '{}' (known: {})",
                name,
                self.names().join(", ")
            ))
        })?;
        builder(params)
    }

    pub fn build_default(&self, name: &str) -> Result<ModelCatalogEntry> {
        self.build(name, &BTreeMap::new())
    }

    /// Default-parameter entries for every registered model.
    pub fn default_catalog(&self) -> Vec<ModelCatalogEntry> {
        self.names()
            .iter()
            .map(|n| self.build_default(n).expect("default parameters are valid"))
            .collect()
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_catalog()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> SimpleC2 {
        SimpleC2 {
            eval: Arc::new(|x: &[f64]| x[0] * x[0]),
            grad: Some(Arc::new(|x: &[f64]| vec![2.0 * x[0]])),
            hess: Some(Arc::new(|_x: &[f64]| vec![2.0])),
        }
    }

    #[test]
    fn drift_examples() {
        let ou = ou_model(1.0, 1.0, 1);
        assert_eq!(ou.eval_drift(0.0, &[2.0]).unwrap(), vec![-2.0]);
        let sine = sine_model(1.0, 1.0);
        assert_eq!(sine.eval_drift(0.0, &[0.0]).unwrap(), vec![0.0]);
        let sw = switching_model(1.0);
        assert_eq!(sw.eval_drift(1.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn diffusion_examples() {
        let ou = ou_model(1.0, 1.0, 1);
        assert_eq!(ou.eval_diffusion(0.3, &[5.0]).unwrap(), vec![1.0]);
        let sine = sine_model(1.0, 0.0);
        assert_eq!(sine.eval_diffusion(2.0, &[1.0]).unwrap(), vec![0.0]);
        let ou2 = ou_model(1.0, 2f64.sqrt(), 1);
        assert_eq!(ou2.eval_diffusion(5.0, &[-3.0]).unwrap(), vec![2f64.sqrt()]);
    }

    #[test]
    fn drift_rejects_non_finite_input() {
        let ou = ou_model(1.0, 1.0, 1);
        assert!(matches!(
            ou.eval_drift(0.0, &[f64::NAN]),
            Err(DecayError::InvalidArgument(_))
        ));
        assert!(ou.eval_drift(f64::INFINITY, &[0.0]).is_err());
    }

    #[test]
    fn generator_on_quadratic_is_zero_for_critical_ou() {
        // 1/2 * 2 * 2 + (-1) * 2 x at x = 1 with sigma = sqrt(2).
        let ou = ou_model(1.0, 2f64.sqrt(), 1);
        let val = ou.apply_generator(0.0, &[1.0], &quadratic()).unwrap();
        assert!(val.abs() < 1e-12, "got {val}");
    }

    #[test]
    fn generator_of_constant_vanishes() {
        let sw = switching_model(1.0);
        let constant = SimpleC2 {
            eval: Arc::new(|_x: &[f64]| 3.5),
            grad: Some(Arc::new(|_x: &[f64]| vec![0.0])),
            hess: Some(Arc::new(|_x: &[f64]| vec![0.0])),
        };
        assert_eq!(sw.apply_generator(2.0, &[0.4], &constant).unwrap(), 0.0);
    }

    #[test]
    fn generator_linear_function_sine_at_origin() {
        let sine = sine_model(1.0, 1.0);
        let linear = SimpleC2 {
            eval: Arc::new(|x: &[f64]| x[0]),
            grad: Some(Arc::new(|_x: &[f64]| vec![1.0])),
            hess: Some(Arc::new(|_x: &[f64]| vec![0.0])),
        };
        let val = sine.apply_generator(0.0, &[0.0], &linear).unwrap();
        assert!(val.abs() < 1e-15);
    }

    #[test]
    fn generator_missing_derivatives_is_capability_error() {
        let ou = ou_model(1.0, 1.0, 1);
        let no_grad = SimpleC2 {
            eval: Arc::new(|x: &[f64]| x[0]),
            grad: None,
            hess: None,
        };
        assert!(matches!(
            ou.apply_generator(0.0, &[1.0], &no_grad),
            Err(DecayError::Capability(_))
        ));
    }

    #[test]
    fn generator_is_linear_in_f() {
        let sine = sine_model(1.0, 0.7);
        let f = quadratic();
        let g = SimpleC2 {
            eval: Arc::new(|x: &[f64]| x[0].tanh()),
            grad: Some(Arc::new(|x: &[f64]| {
                let c = x[0].cosh();
                vec![1.0 / (c * c)]
            })),
            hess: Some(Arc::new(|x: &[f64]| {
                let t = x[0].tanh();
                let c = x[0].cosh();
                vec![-2.0 * t / (c * c)]
            })),
        };
        let (alpha, beta) = (1.7, -0.4);
        for &x in &[-2.0, -0.5, 0.0, 1.3, 3.1] {
            let combo = SimpleC2 {
                eval: {
                    let (f, g) = (f.clone(), g.clone());
                    Arc::new(move |x: &[f64]| alpha * f.value(x) + beta * g.value(x))
                },
                grad: {
                    let (f, g) = (f.clone(), g.clone());
                    Some(Arc::new(move |x: &[f64]| {
                        let a = f.gradient(x).unwrap();
                        let b = g.gradient(x).unwrap();
                        vec![alpha * a[0] + beta * b[0]]
                    }))
                },
                hess: {
                    let (f, g) = (f.clone(), g.clone());
                    Some(Arc::new(move |x: &[f64]| {
                        let a = f.hessian(x).unwrap();
                        let b = g.hessian(x).unwrap();
                        vec![alpha * a[0] + beta * b[0]]
                    }))
                },
            };
            let lhs = sine.apply_generator(0.5, &[x], &combo).unwrap();
            let rhs = alpha * sine.apply_generator(0.5, &[x], &f).unwrap()
                + beta * sine.apply_generator(0.5, &[x], &g).unwrap();
            let tol = 1e-12 * (1.0 + rhs.abs());
            assert!((lhs - rhs).abs() <= tol, "x = {x}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn limiting_model_examples() {
        // Decaying perturbation: b(t, x) = -x e^-t - x has limit -x.
        let model = ou_relax_model(1.0);
        let lim = model.limiting_model().unwrap();
        assert!(lim.flags.time_homogeneous);
        assert_eq!(lim.eval_drift(0.0, &[2.0]).unwrap(), vec![-2.0]);

        // Autonomous ou: the limit has identical coefficients.
        let ou = ou_model(1.5, 0.5, 1);
        let lim = ou.limiting_model().unwrap();
        for &x in &[-1.0, 0.0, 2.5] {
            assert_eq!(
                lim.eval_drift(3.0, &[x]).unwrap(),
                ou.eval_drift(3.0, &[x]).unwrap()
            );
            assert_eq!(
                lim.eval_diffusion(3.0, &[x]).unwrap(),
                ou.eval_diffusion(3.0, &[x]).unwrap()
            );
        }

        // No declared limit: capability error.
        let sw = switching_model(1.0);
        assert!(matches!(sw.limiting_model(), Err(DecayError::Capability(_))));
    }

    #[test]
    fn pointwise_limit_holds_at_large_t() {
        let model = ou_relax_model(1.0);
        let lim = model.limiting_model().unwrap();
        for i in 0..10 {
            let x = -3.0 + 0.6 * i as f64;
            let far = model.eval_drift(1e3, &[x]).unwrap()[0];
            let inf = lim.eval_drift(0.0, &[x]).unwrap()[0];
            assert!((far - inf).abs() < 1e-9, "x = {x}");
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let registry = ModelRegistry::with_catalog();
        for entry in registry.default_catalog() {
            let model = &entry.coefficients;
            if !model.has_analytic_drift_jacobian() {
                continue;
            }
            let d = model.dim();
            let mut analytic = vec![0.0; d * d];
            let mut numeric = vec![0.0; d * d];
            // 10 x 10 grid in (t, x), kept inside the state range the
            // contractive dynamics visit.
            for ti in 0..10 {
                let t = 0.5 * ti as f64;
                for xi in 0..10 {
                    let x = vec![-1.3 + 0.27 * xi as f64; d];
                    model.drift_jacobian_into(t, &x, &mut analytic);
                    model.fd_jacobian(&model.drift, t, &x, &mut numeric, 1e-5);
                    for k in 0..d * d {
                        let tol = 1e-4 * (1.0 + analytic[k].abs());
                        assert!(
                            (analytic[k] - numeric[k]).abs() <= tol,
                            "{} at (t={t}, x={:?}): {} vs {}",
                            entry.name,
                            x,
                            analytic[k],
                            numeric[k]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn switching_drift_slope_is_below_threshold() {
        let model = switching_model(1.0);
        let mut jac = [0.0];
        for ti in 0..=20 {
            let t = 1.0 + 4.0 * ti as f64 / 20.0;
            for xi in 0..=30 {
                let x = -3.0 + 6.0 * xi as f64 / 30.0;
                model.drift_jacobian_into(t, &[x], &mut jac);
                assert!(
                    jac[0] <= -0.7,
                    "slope {} at (t = {t}, x = {x})",
                    jac[0]
                );
            }
        }
    }

    #[test]
    fn registry_reports_unknown_names_and_params() {
        let registry = ModelRegistry::with_catalog();
        assert!(registry.build_default("nope").is_err());
        let mut params = BTreeMap::new();
        params.insert("bogus".to_string(), 1.0);
        assert!(registry.build("ou", &params).is_err());
    }

    #[test]
    fn catalog_contains_required_models() {
        let registry = ModelRegistry::with_catalog();
        let names = registry.names();
        for required in ["ou", "sine", "switching", "mv_frozen_linear"] {
            assert!(names.iter().any(|n| n == required), "missing {required}");
        }
    }
}
