//! Check execution and reporting. Every check writes one CSV (LF endings,
//! `.` decimal, header row) into the output directory; verdicts, measured
//! constants, the resolved config and the tool version land in report.json.
//! Progress goes to stderr only.

use crate::config::{CheckKind, ExperimentConfig};
use anyhow::{anyhow, bail, Context, Result};
use decay_core::lyapunov::{
    check_dissipativity, check_monotonicity, coupling_contraction, moment_decay,
    LyapunovFunction, MomentDecayOutcome,
};
use decay_core::measures::{
    ck_consistency, convergence_profile, estimate_invariant, limiting_comparison, ClosedForm,
    LimitingOutcome, Metric,
};
use decay_core::mckean::{mv_consistency, MVCoefficientSet};
use decay_core::models::ModelCatalogEntry;
use decay_core::sensitivity::{envelope_check, DecayEnvelope, DerivOrder};
use decay_core::simulate::InitialCondition;
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub verdict: Verdict,
    pub csv: Option<String>,
    pub details: serde_json::Value,
}

pub struct RunResult {
    pub outcomes: Vec<CheckOutcome>,
    pub all_pass: bool,
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<String> {
    let file = format!("{name}.csv");
    std::fs::write(dir.join(&file), body).with_context(|| format!("writing {file}"))?;
    Ok(file)
}

fn lyapunov_by_name(name: &str, dim: usize) -> Result<LyapunovFunction> {
    match name {
        "squared_norm" => Ok(LyapunovFunction::squared_norm(dim)),
        "one_plus_squared_norm" => Ok(LyapunovFunction::one_plus_squared_norm(dim)),
        other => bail!("moments.w: unknown Lyapunov function '{other}'"),
    }
}

/// Executes the configured checks in declaration order and writes the
/// report. Returns the outcomes; the caller derives the exit status.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let registry = decay_core::models::ModelRegistry::with_catalog();
    let entry = config.validate(&registry).map_err(|e| anyhow!("config validation: {e}"))?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;

    let mut outcomes = Vec::new();
    for check in &config.checks {
        eprintln!("[decay] running check '{}'", check.name());
        let mut results = run_check(*check, config, &entry)
            .with_context(|| format!("check '{}'", check.name()))?;
        outcomes.append(&mut results);
    }
    let all_pass = outcomes.iter().all(|o| o.verdict != Verdict::Fail);

    let report = json!({
        "tool": "decay",
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": env!("GIT_DESCRIBE"),
        "created_unix": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "seed": config.seed,
        "model": { "name": entry.name, "params": entry.params, "claimed_m1": entry.claimed_m1 },
        "config": serde_json::to_value(config)?,
        "checks": serde_json::to_value(&outcomes)?,
        "all_pass": all_pass,
    });
    std::fs::write(
        config.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    eprintln!(
        "[decay] wrote {} ({} checks, all_pass = {all_pass})",
        config.output_dir.join("report.json").display(),
        outcomes.len()
    );
    Ok(RunResult { outcomes, all_pass })
}

fn run_check(
    kind: CheckKind,
    config: &ExperimentConfig,
    entry: &ModelCatalogEntry,
) -> Result<Vec<CheckOutcome>> {
    let model = &entry.coefficients;
    let dim = model.dim();
    let dir = &config.output_dir;
    match kind {
        CheckKind::Envelope => {
            let spec = &config.envelope;
            let order = DerivOrder::from_u8(spec.order)?;
            let mut outcomes = Vec::new();
            for (i, tf_spec) in config.resolved_test_functions().iter().enumerate() {
                let phi = tf_spec.build(dim, &format!("test_functions[{i}]"))?;
                let rate = spec
                    .rate
                    .or_else(|| entry.claimed_m1.and_then(|m1| phi.family.theoretical_rate(m1)))
                    .ok_or_else(|| {
                        anyhow!("envelope.rate: no rate given and none derivable from the family")
                    })?;
                let envelope = match spec.form.as_str() {
                    "poly" => DecayEnvelope::poly(spec.c_const, spec.p, spec.m, rate)?,
                    "gauss" => DecayEnvelope::gauss(spec.c_const, spec.gauss_c, rate)?,
                    other => bail!("envelope.form: unknown form '{other}'"),
                };
                let report = envelope_check(
                    model,
                    &phi,
                    &envelope,
                    &config.resolved_x_grid(dim),
                    &config.times,
                    order,
                    config.n_paths,
                    config.seed,
                    config.dt,
                    config.tolerance("envelope", 0.1),
                )?;
                let csv = write_csv(dir, &format!("envelope_{}", tf_spec.name), &report.to_csv())?;
                outcomes.push(CheckOutcome {
                    name: format!("envelope[{}]", tf_spec.name),
                    verdict: if report.pass { Verdict::Pass } else { Verdict::Fail },
                    csv: Some(csv),
                    details: serde_json::to_value(&report)?,
                });
            }
            Ok(outcomes)
        }
        CheckKind::Dissipativity | CheckKind::Monotonicity => {
            let a = &config.assumptions;
            let w = LyapunovFunction::squared_norm(dim);
            let check = if kind == CheckKind::Dissipativity {
                check_dissipativity(
                    model,
                    &w,
                    (a.t_min, a.t_max),
                    (a.x_min, a.x_max),
                    a.n_samples,
                    config.seed,
                )?
            } else {
                check_monotonicity(
                    model,
                    a.m,
                    (a.t_min, a.t_max),
                    (a.x_min, a.x_max),
                    a.n_samples,
                    config.seed,
                )?
            };
            // Measured constants can only refute: the verdict compares the
            // binding constant against the claimed one when present.
            let verdict = match entry.claimed_m1 {
                Some(claimed) => {
                    if check.m1_max >= claimed - config.tolerance(kind.name(), 1e-6) {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    }
                }
                None => Verdict::Pass,
            };
            let mut body = String::from("quantity,value\n");
            let _ = writeln!(body, "m1_max,{}", check.m1_max);
            let _ = writeln!(body, "m1_p99,{}", check.m1_p99);
            let _ = writeln!(body, "worst_ratio,{}", check.worst_ratio);
            let _ = writeln!(body, "worst_t,{}", check.worst_t);
            let _ = writeln!(body, "n_used,{}", check.n_used);
            let _ = writeln!(body, "n_skipped,{}", check.n_skipped);
            let csv = write_csv(dir, kind.name(), &body)?;
            Ok(vec![CheckOutcome {
                name: kind.name().into(),
                verdict,
                csv: Some(csv),
                details: json!({
                    "check": check,
                    "claimed_m1": entry.claimed_m1,
                    "reference_rates": entry.reference_rates,
                }),
            }])
        }
        CheckKind::Coupling => {
            let spec = &config.coupling;
            let a = &config.assumptions;
            let w = LyapunovFunction::squared_norm(dim);
            let diss = check_dissipativity(
                model,
                &w,
                (a.t_min, a.t_max),
                (a.x_min, a.x_max),
                a.n_samples,
                config.seed,
            )?;
            let rows = coupling_contraction(
                model,
                &w,
                &vec![spec.x; dim],
                &vec![spec.y; dim],
                &spec.times,
                config.n_paths,
                config.seed,
                config.dt,
                diss.m1_max,
                config.tolerance("coupling", 0.05),
            )?;
            let mut body = String::from("s,estimate,stderr,bound,pass\n");
            for r in &rows {
                let _ = writeln!(
                    body,
                    "{},{},{},{},{}",
                    r.s,
                    r.estimate,
                    r.stderr,
                    r.bound,
                    u8::from(r.pass)
                );
            }
            let csv = write_csv(dir, "coupling", &body)?;
            let pass = rows.iter().all(|r| r.pass);
            Ok(vec![CheckOutcome {
                name: "coupling".into(),
                verdict: if pass { Verdict::Pass } else { Verdict::Fail },
                csv: Some(csv),
                details: json!({ "m1_est": diss.m1_max, "rows": rows }),
            }])
        }
        CheckKind::Moments => {
            let spec = &config.moments;
            let w = lyapunov_by_name(&spec.w, dim)?;
            let m1 = spec
                .m1
                .or(entry.claimed_m1.map(|m| 2.0 * m))
                .ok_or_else(|| anyhow!("moments.m1: required without a claimed M1"))?;
            let outcome = moment_decay(
                model,
                &w,
                m1,
                &InitialCondition::point(&vec![spec.x0; dim]),
                &spec.times,
                config.n_paths,
                config.seed,
                config.dt,
                config.tolerance("moments", 0.05),
            )?;
            match outcome {
                MomentDecayOutcome::NotApplicable { drift_report } => Ok(vec![CheckOutcome {
                    name: "moments".into(),
                    verdict: Verdict::NotApplicable,
                    csv: None,
                    details: json!({ "drift_report": drift_report }),
                }]),
                MomentDecayOutcome::Table { drift_report, rows } => {
                    let mut body = String::from("s,estimate,stderr,bound,pass\n");
                    for r in &rows {
                        let _ = writeln!(
                            body,
                            "{},{},{},{},{}",
                            r.s,
                            r.estimate,
                            r.stderr,
                            r.bound,
                            u8::from(r.pass)
                        );
                    }
                    let csv = write_csv(dir, "moments", &body)?;
                    let pass = rows.iter().all(|r| r.pass);
                    Ok(vec![CheckOutcome {
                        name: "moments".into(),
                        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
                        csv: Some(csv),
                        details: json!({ "drift_report": drift_report, "rows": rows }),
                    }])
                }
            }
        }
        CheckKind::Invariant => {
            let spec = &config.invariant;
            let target = if model.flags.time_homogeneous {
                model.clone()
            } else {
                model.limiting_model()?
            };
            let closed_form = closed_form_for(entry);
            let inv = estimate_invariant(
                &target,
                spec.burn_in,
                spec.n_samples,
                spec.thinning,
                config.seed,
                config.dt,
                closed_form,
            )?;
            let mean = inv.measure.mean();
            let var = inv.measure.variance();
            let mut body = String::from("coord,mean,variance\n");
            for c in 0..dim {
                let _ = writeln!(body, "{c},{},{}", mean[c], var[c]);
            }
            let csv = write_csv(dir, "invariant", &body)?;
            let check = inv.moment_check();
            let verdict = match &check {
                Some(c) if !c.pass => Verdict::Fail,
                _ => Verdict::Pass,
            };
            Ok(vec![CheckOutcome {
                name: "invariant".into(),
                verdict,
                csv: Some(csv),
                details: json!({
                    "mean": mean,
                    "variance": var,
                    "n_samples": inv.measure.n(),
                    "burn_in": inv.burn_in,
                    "moment_check": check,
                }),
            }])
        }
        CheckKind::Convergence => {
            let spec = &config.convergence;
            let inv_spec = &config.invariant;
            let target = if model.flags.time_homogeneous {
                model.clone()
            } else {
                model.limiting_model()?
            };
            let q = estimate_invariant(
                &target,
                inv_spec.burn_in,
                inv_spec.n_samples,
                inv_spec.thinning,
                config.seed,
                config.dt,
                closed_form_for(entry),
            )?;
            let metric = match spec.metric.as_str() {
                "w1" => Metric::W1,
                "w2" => Metric::W2,
                "wtv" => Metric::Wtv(LyapunovFunction::squared_norm(dim)),
                other => bail!("convergence.metric: unknown metric '{other}'"),
            };
            let profile = convergence_profile(
                model,
                &InitialCondition::point(&vec![spec.x; dim]),
                &q,
                &spec.times,
                config.n_paths,
                config.seed,
                config.dt,
                &metric,
            )?;
            let mut body = String::from("s,distance\n");
            for r in &profile.rows {
                let _ = writeln!(body, "{},{}", r.s, r.distance);
            }
            let csv = write_csv(dir, "convergence", &body)?;
            let rate = spec.rate.or(entry.claimed_m1);
            let verdict = match (&profile.fit, rate) {
                (Some(fit), Some(rate)) => {
                    if fit.slope <= -rate + (3.0 * fit.slope_halfwidth).max(0.1) {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    }
                }
                _ => Verdict::Pass,
            };
            Ok(vec![CheckOutcome {
                name: "convergence".into(),
                verdict,
                csv: Some(csv),
                details: json!({ "profile": profile, "expected_rate": rate }),
            }])
        }
        CheckKind::Ck => {
            let spec = &config.ck;
            let mut body = String::from("tau,s,repeat,ks,threshold,pass\n");
            let mut rows = Vec::new();
            let mut all_pass = true;
            for &tau in &spec.taus {
                for &s in &spec.ss {
                    let mut failures = 0usize;
                    for rep in 0..spec.repeats {
                        let r = ck_consistency(
                            model,
                            tau,
                            s,
                            &vec![spec.x; dim],
                            config.n_paths,
                            config.seed.wrapping_add(rep as u64),
                            config.dt,
                        )?;
                        let _ = writeln!(
                            body,
                            "{tau},{s},{rep},{},{},{}",
                            r.ks,
                            r.threshold,
                            u8::from(r.pass)
                        );
                        if !r.pass {
                            failures += 1;
                        }
                        rows.push(json!({
                            "tau": tau, "s": s, "repeat": rep,
                            "ks": r.ks, "threshold": r.threshold, "pass": r.pass,
                        }));
                    }
                    // One failure allowed per full 20 repeats.
                    if failures > spec.repeats / 20 {
                        all_pass = false;
                    }
                }
            }
            let csv = write_csv(dir, "ck", &body)?;
            Ok(vec![CheckOutcome {
                name: "ck".into(),
                verdict: if all_pass { Verdict::Pass } else { Verdict::Fail },
                csv: Some(csv),
                details: json!({ "rows": rows }),
            }])
        }
        CheckKind::Limiting => {
            let spec = &config.limiting;
            let w = LyapunovFunction::squared_norm(dim);
            let m1 = spec
                .m1
                .or(entry.claimed_m1.map(|m| 2.0 * m))
                .ok_or_else(|| anyhow!("limiting.m1: required without a claimed M1"))?;
            let outcome = limiting_comparison(
                model,
                &w,
                m1,
                &vec![spec.x; dim],
                &spec.times,
                config.n_paths,
                config.seed,
                config.dt,
                config.tolerance("limiting", 0.05),
            )?;
            match outcome {
                LimitingOutcome::NotApplicable { drift_report } => Ok(vec![CheckOutcome {
                    name: "limiting".into(),
                    verdict: Verdict::NotApplicable,
                    csv: None,
                    details: json!({ "drift_report": drift_report }),
                }]),
                LimitingOutcome::Table { drift_report, rows } => {
                    let mut body = String::from("s,gap,stderr,bound,pass\n");
                    for r in &rows {
                        let _ = writeln!(
                            body,
                            "{},{},{},{},{}",
                            r.s,
                            r.gap,
                            r.stderr,
                            r.bound,
                            u8::from(r.pass)
                        );
                    }
                    let csv = write_csv(dir, "limiting", &body)?;
                    let pass = rows.iter().all(|r| r.pass);
                    Ok(vec![CheckOutcome {
                        name: "limiting".into(),
                        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
                        csv: Some(csv),
                        details: json!({ "drift_report": drift_report, "rows": rows }),
                    }])
                }
            }
        }
        CheckKind::Mckean => {
            let spec = &config.mckean;
            let mv = MVCoefficientSet::mean_field_linear(spec.a, spec.c, spec.sigma, dim);
            let r = mv_consistency(
                &mv,
                &vec![spec.x; dim],
                spec.s,
                spec.n_particles,
                config.n_paths,
                config.seed,
                config.dt,
            )?;
            let mut body = String::from("quantity,value\n");
            let _ = writeln!(body, "particle_mean,{}", r.particle_mean[0]);
            let _ = writeln!(body, "frozen_mean,{}", r.frozen_mean[0]);
            let _ = writeln!(body, "mean_gap,{}", r.mean_gap[0]);
            let _ = writeln!(body, "mean_tol,{}", r.mean_tol[0]);
            let _ = writeln!(body, "var_gap,{}", r.var_gap[0]);
            let _ = writeln!(body, "var_tol,{}", r.var_tol[0]);
            let _ = writeln!(body, "ks,{}", r.ks);
            let _ = writeln!(body, "ks_threshold,{}", r.ks_threshold);
            let _ = writeln!(body, "allowance,{}", r.allowance);
            let _ = writeln!(body, "pass,{}", u8::from(r.pass));
            let csv = write_csv(dir, "mckean", &body)?;
            Ok(vec![CheckOutcome {
                name: "mckean".into(),
                verdict: if r.pass { Verdict::Pass } else { Verdict::Fail },
                csv: Some(csv),
                details: serde_json::to_value(&r)?,
            }])
        }
    }
}

/// Known closed-form invariant laws for catalog models.
fn closed_form_for(entry: &ModelCatalogEntry) -> Option<ClosedForm> {
    match entry.name.as_str() {
        "ou" => {
            let m1 = entry.params.get("M1").copied()?;
            let sigma = entry.params.get("sigma").copied()?;
            let dim = entry.params.get("dim").copied().unwrap_or(1.0) as usize;
            Some(ClosedForm::Gaussian {
                mean: vec![0.0; dim],
                variance: vec![sigma * sigma / (2.0 * m1); dim],
            })
        }
        // The relaxed model's limit is the unit-rate OU.
        "ou_relax" => {
            let sigma = entry.params.get("sigma").copied()?;
            Some(ClosedForm::Gaussian { mean: vec![0.0], variance: vec![sigma * sigma / 2.0] })
        }
        _ => None,
    }
}
