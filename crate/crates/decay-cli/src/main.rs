//! `decay`: config-driven experiment runner for the SDE derivative-decay
//! toolkit. Progress goes to stderr; data goes to files and stdout.

mod config;
mod run;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use config::{CheckKind, ExperimentConfig, ModelSpec, TestFunctionSpec, XPoint};
use decay_core::lyapunov::{check_dissipativity, check_drift_condition, check_monotonicity, LyapunovFunction};
use decay_core::models::ModelRegistry;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "decay", version, about = "Monte Carlo checks for derivative decay of non-autonomous SDEs")]
struct Cli {
    /// Cap worker threads (mirrors DECAY_WORKERS). Does not affect results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the checks described by a TOML (or JSON) experiment config.
    Run {
        config: PathBuf,
    },
    /// List the model catalog.
    Models {
        #[arg(long)]
        json: bool,
    },
    /// Sample the structural assumptions for one model and emit a JSON
    /// verdict document.
    CheckAssumptions {
        #[arg(long)]
        model: String,
        /// Claimed contraction constant (monotonicity normalization).
        #[arg(long = "M1")]
        m1: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        m0: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        n_samples: usize,
        /// Sample t in [t_min, t_max].
        #[arg(long, default_value_t = 0.0)]
        t_min: f64,
        #[arg(long, default_value_t = 5.0)]
        t_max: f64,
        /// Sample x, y coordinates in [x_min, x_max].
        #[arg(long, default_value_t = -5.0)]
        x_min: f64,
        #[arg(long, default_value_t = 5.0)]
        x_max: f64,
    },
    /// Flag-form envelope check (ephemeral config).
    Envelope {
        #[arg(long)]
        model: String,
        #[arg(long = "M1")]
        m1: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value = "identity")]
        phi: String,
        /// Comma-separated times in (1, inf).
        #[arg(long, default_value = "1.5,2,3,4", value_delimiter = ',')]
        times: Vec<f64>,
        /// Comma-separated grid points (d = 1).
        #[arg(long = "x-grid", value_delimiter = ',')]
        x_grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        n_paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        order: u8,
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
        #[arg(long = "output-dir", default_value = "decay-out")]
        output_dir: PathBuf,
    },
}

fn init_workers(cli_workers: Option<usize>) {
    let workers = cli_workers.or_else(|| {
        std::env::var("DECAY_WORKERS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = workers {
        if n >= 1 {
            // Ignore the error if a pool already exists (e.g. in tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn model_params(
    sigma: Option<f64>,
    m1: Option<f64>,
    dim: Option<usize>,
    a: Option<f64>,
    c: Option<f64>,
    m0: Option<f64>,
) -> BTreeMap<String, f64> {
    let mut params = BTreeMap::new();
    if let Some(v) = m1 {
        params.insert("M1".to_string(), v);
    }
    if let Some(v) = sigma {
        params.insert("sigma".to_string(), v);
    }
    if let Some(v) = dim {
        params.insert("dim".to_string(), v as f64);
    }
    if let Some(v) = a {
        params.insert("a".to_string(), v);
    }
    if let Some(v) = c {
        params.insert("c".to_string(), v);
    }
    if let Some(v) = m0 {
        params.insert("m0".to_string(), v);
    }
    params
}

fn main() {
    let cli = Cli::parse();
    init_workers(cli.workers);
    let code = match dispatch(cli.cmd) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = run::run_experiment(&cfg)?;
            for o in &result.outcomes {
                eprintln!("[decay] {}: {:?}", o.name, o.verdict);
            }
            Ok(result.all_pass)
        }
        Cmd::Models { json } => {
            let registry = ModelRegistry::with_catalog();
            let catalog = registry.default_catalog();
            if json {
                let doc: Vec<_> = catalog
                    .iter()
                    .map(|e| {
                        json!({
                            "name": e.name,
                            "params": e.params,
                            "claimed_m1": e.claimed_m1,
                            "reference_rates": e.reference_rates,
                            "dim": e.coefficients.dim(),
                            "time_homogeneous": e.coefficients.flags.time_homogeneous,
                            "superlinear_drift": e.coefficients.flags.superlinear_drift,
                            "has_limiting": e.coefficients.has_limiting(),
                            "notes": e.notes,
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string_pretty(&doc)?);
            } else {
                for e in &catalog {
                    let params: Vec<String> =
                        e.params.iter().map(|(k, v)| format!("{k} = {v}")).collect();
                    println!("{}", e.name);
                    println!("  params: {}", params.join(", "));
                    if let Some(m1) = e.claimed_m1 {
                        println!("  claimed M1: {m1} (reference rates {:?})", e.reference_rates);
                    }
                    println!("  {}", e.notes);
                }
            }
            Ok(true)
        }
        Cmd::CheckAssumptions {
            model,
            m1,
            sigma,
            dim,
            a,
            c,
            m0,
            seed,
            n_samples,
            t_min,
            t_max,
            x_min,
            x_max,
        } => {
            let registry = ModelRegistry::with_catalog();
            let params = model_params(sigma, m1, dim, a, c, m0);
            let entry = registry
                .build(&model, &params)
                .map_err(|e| anyhow!("--model: {e}"))?;
            let coeffs = &entry.coefficients;
            let d = coeffs.dim();
            let w = LyapunovFunction::squared_norm(d);
            let t_range = (t_min, t_max);
            let x_range = (x_min, x_max);
            let diss = check_dissipativity(coeffs, &w, t_range, x_range, n_samples, seed)?;
            let mono = check_monotonicity(coeffs, 2, t_range, x_range, n_samples, seed)?;
            let claimed = entry.claimed_m1.unwrap_or(0.0);
            let drift = check_drift_condition(
                coeffs,
                &LyapunovFunction::one_plus_squared_norm(d),
                claimed.max(1e-6),
                t_range,
                x_range,
                n_samples.min(10_000),
                seed,
            )?;
            let doc = json!({
                "model": entry.name,
                "params": entry.params,
                "claimed_m1": entry.claimed_m1,
                "reference_rates": entry.reference_rates,
                "sampled_region": { "t": [t_min, t_max], "x": [x_min, x_max] },
                "n_samples": n_samples,
                "seed": seed,
                "assumptions": [
                    {
                        "name": "dissipativity",
                        "statement": "two-point generator ratio on W = |x|^2",
                        "m1_est": diss.m1_max,
                        "m1_p99": diss.m1_p99,
                        "holds_on_sampled_region": entry.claimed_m1.map(|m| diss.m1_max >= m - 1e-6),
                        "detail": diss,
                    },
                    {
                        "name": "monotonicity",
                        "statement": "one-sided drift/diffusion increment condition (m = 2)",
                        "m1_est": mono.m1_max,
                        "m1_p99": mono.m1_p99,
                        "holds_on_sampled_region": entry.claimed_m1.map(|m| mono.m1_max >= m - 1e-6),
                        "detail": mono,
                    },
                    {
                        "name": "drift_condition",
                        "statement": "L W <= -M1 W for W = 1 + |x|^2",
                        "holds_on_sampled_region": drift.holds,
                        "detail": drift,
                    },
                ],
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(true)
        }
        Cmd::Envelope {
            model,
            m1,
            sigma,
            phi,
            times,
            x_grid,
            n_paths,
            dt,
            seed,
            order,
            tolerance,
            output_dir,
        } => {
            let params = model_params(sigma, m1, None, None, None, None);
            let mut tolerances = BTreeMap::new();
            tolerances.insert("envelope".to_string(), tolerance);
            let cfg = ExperimentConfig {
                seed,
                model: ModelSpec { name: model, params },
                test_functions: vec![TestFunctionSpec { name: phi, ..Default::default() }],
                times,
                x_grid: x_grid
                    .map(|g| g.into_iter().map(XPoint::Scalar).collect())
                    .unwrap_or_default(),
                n_paths,
                dt,
                checks: vec![CheckKind::Envelope],
                tolerances,
                output_dir,
                envelope: config::EnvelopeSpec { order, ..Default::default() },
                assumptions: Default::default(),
                coupling: Default::default(),
                moments: Default::default(),
                invariant: Default::default(),
                convergence: Default::default(),
                ck: Default::default(),
                limiting: Default::default(),
                mckean: Default::default(),
            };
            let result = run::run_experiment(&cfg)?;
            Ok(result.all_pass)
        }
    }
}
