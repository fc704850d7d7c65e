//! Deterministic reductions and the small statistical helpers shared by the
//! estimator modules.
//!
//! All Monte Carlo reductions go through [`pairwise_sum`], whose reduction
//! tree depends only on the slice length. Per-path values are always
//! collected in path-index order first, so results are bit-identical
//! regardless of how many workers produced them.

use crate::error::{DecayError, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Fixed-tree pairwise sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Unbiased sample variance and the standard error of that variance
/// estimate (normal approximation: var * sqrt(2/(n-1))).
pub fn variance_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (var, var * (2.0 / (n - 1) as f64).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic in one dimension.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(|p, q| p.partial_cmp(q).expect("non-finite sample"));
    b.sort_unstable_by(|p, q| p.partial_cmp(q).expect("non-finite sample"));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut diff = 0.0f64;
    let mut max_diff = 0.0f64;
    while i < a.len() || j < b.len() {
        let advance_a = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x <= y,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if advance_a {
            let x = a[i];
            while i < a.len() && a[i] == x {
                diff += 1.0 / na;
                i += 1;
            }
            while j < b.len() && b[j] == x {
                diff -= 1.0 / nb;
                j += 1;
            }
        } else {
            let y = b[j];
            while j < b.len() && b[j] == y {
                diff -= 1.0 / nb;
                j += 1;
            }
        }
        max_diff = max_diff.max(diff.abs());
    }
    max_diff
}

/// Critical value of the two-sample KS statistic at the 1% level:
/// `1.628 * sqrt((n + m) / (n m))`.
pub fn ks_threshold_1pct(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// q-th percentile (0..=1) of an unsorted slice, by sorting a copy.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty() && (0.0..=1.0).contains(&q));
    let mut v = xs.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Straight-line fit y = intercept + slope * x.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% half-width of the slope estimate.
    pub slope_halfwidth: f64,
    pub n_points: usize,
}

fn t_quantile_975(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("valid dof")
        .inverse_cdf(0.975)
}

/// Ordinary least squares; the slope half-width comes from the residual
/// variance.
pub fn ols_line_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let w = vec![1.0; x.len()];
    line_fit_impl(x, y, &w, false)
}

/// Weighted least squares with weights interpreted as inverse variances of
/// y. The half-width uses the propagated measurement variance, inflated by
/// the reduced chi-square when the scatter exceeds the claimed errors.
pub fn wls_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    line_fit_impl(x, y, w, true)
}

fn line_fit_impl(x: &[f64], y: &[f64], w: &[f64], informative_weights: bool) -> Result<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n || w.len() != n {
        return Err(DecayError::invalid(format!(
            "line fit needs >= 3 points with matching lengths, got {} / {} / {}",
            n,
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
        return Err(DecayError::invalid("line fit weights must be positive and finite"));
    }
    let sw = pairwise_sum(w);
    let xbar = pairwise_sum(&x.iter().zip(w).map(|(&xi, &wi)| wi * xi).collect::<Vec<_>>()) / sw;
    let ybar = pairwise_sum(&y.iter().zip(w).map(|(&yi, &wi)| wi * yi).collect::<Vec<_>>()) / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += w[i] * (x[i] - xbar) * (x[i] - xbar);
        sxy += w[i] * (x[i] - xbar) * (y[i] - ybar);
    }
    if sxx <= 0.0 {
        return Err(DecayError::invalid("line fit abscissae are degenerate"));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut chi2 = 0.0;
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        chi2 += w[i] * r * r;
    }
    let dof = n - 2;
    let var_slope = if informative_weights {
        (1.0 / sxx) * (chi2 / dof as f64).max(1.0)
    } else {
        (chi2 / dof as f64) / sxx
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_halfwidth: t_quantile_975(dof) * var_slope.max(0.0).sqrt(),
        n_points: n,
    })
}
