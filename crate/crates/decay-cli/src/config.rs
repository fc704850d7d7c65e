//! Experiment configuration: TOML primary, JSON accepted. Every referenced
//! name is validated against the model catalog before anything runs, and a
//! validation error names the offending field.

use anyhow::{anyhow, bail, Context, Result};
use decay_core::models::{ModelCatalogEntry, ModelRegistry};
use decay_core::sensitivity::{build_test_function, Family, TestFunction};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub name: String,
    /// "s_m", "s_prime" or "unrestricted".
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_m")]
    pub m: u32,
    #[serde(default = "default_c", rename = "C")]
    pub c: f64,
}

fn default_family() -> String {
    "s_prime".into()
}

fn default_m() -> u32 {
    2
}

fn default_c() -> f64 {
    1.0
}

impl Default for TestFunctionSpec {
    fn default() -> Self {
        TestFunctionSpec {
            name: "identity".into(),
            family: default_family(),
            m: default_m(),
            c: default_c(),
        }
    }
}

impl TestFunctionSpec {
    pub fn build(&self, dim: usize, field: &str) -> Result<TestFunction> {
        let family = match self.family.as_str() {
            "s_m" => Family::SM {
                w: decay_core::lyapunov::LyapunovFunction::squared_norm(dim),
                m: self.m,
            },
            "s_prime" => Family::SPrime { m: self.m, c: self.c },
            "unrestricted" => Family::Unrestricted,
            other => bail!("{field}.family: unknown family '{other}' (s_m, s_prime, unrestricted)"),
        };
        build_test_function(&self.name, dim, family)
            .map_err(|e| anyhow!("{field}.name: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Envelope,
    Dissipativity,
    Monotonicity,
    Coupling,
    Moments,
    Invariant,
    Convergence,
    Ck,
    Limiting,
    Mckean,
}

impl CheckKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::Envelope => "envelope",
            CheckKind::Dissipativity => "dissipativity",
            CheckKind::Monotonicity => "monotonicity",
            CheckKind::Coupling => "coupling",
            CheckKind::Moments => "moments",
            CheckKind::Invariant => "invariant",
            CheckKind::Convergence => "convergence",
            CheckKind::Ck => "ck",
            CheckKind::Limiting => "limiting",
            CheckKind::Mckean => "mckean",
        }
    }
}

/// Scalar (d = 1) or vector grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XPoint {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl XPoint {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            XPoint::Scalar(v) => vec![*v],
            XPoint::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSpec {
    #[serde(default = "one_u8")]
    pub order: u8,
    /// "poly" or "gauss".
    #[serde(default = "poly_str")]
    pub form: String,
    #[serde(default = "one_f64", rename = "C")]
    pub c_const: f64,
    #[serde(default = "two_f64")]
    pub p: f64,
    #[serde(default = "two_f64")]
    pub m: f64,
    /// Gaussian exponent constant, used when form = "gauss".
    #[serde(default = "one_f64")]
    pub gauss_c: f64,
    /// Decay rate of G; defaults to the family convention applied to the
    /// model's claimed M1.
    pub rate: Option<f64>,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        EnvelopeSpec {
            order: one_u8(),
            form: poly_str(),
            c_const: one_f64(),
            p: two_f64(),
            m: two_f64(),
            gauss_c: one_f64(),
            rate: None,
        }
    }
}

fn one_u8() -> u8 {
    1
}

fn poly_str() -> String {
    "poly".into()
}

fn one_f64() -> f64 {
    1.0
}

fn two_f64() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionSpec {
    #[serde(default)]
    pub t_min: f64,
    #[serde(default = "five")]
    pub t_max: f64,
    #[serde(default = "minus_five")]
    pub x_min: f64,
    #[serde(default = "five")]
    pub x_max: f64,
    #[serde(default = "assumption_samples")]
    pub n_samples: usize,
    #[serde(default = "default_m")]
    pub m: u32,
}

fn five() -> f64 {
    5.0
}

fn minus_five() -> f64 {
    -5.0
}

fn assumption_samples() -> usize {
    100_000
}

impl Default for AssumptionSpec {
    fn default() -> Self {
        AssumptionSpec {
            t_min: 0.0,
            t_max: five(),
            x_min: minus_five(),
            x_max: five(),
            n_samples: assumption_samples(),
            m: default_m(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(default)]
    pub x: f64,
    #[serde(default = "two_f64")]
    pub y: f64,
    #[serde(default = "coupling_times")]
    pub times: Vec<f64>,
}

fn coupling_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

impl Default for CouplingSpec {
    fn default() -> Self {
        CouplingSpec { x: 0.0, y: two_f64(), times: coupling_times() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSpec {
    /// Claimed M1 for L W <= -M1 W; defaults to twice the model's claimed
    /// monotonicity constant (the quadratic-W normalization).
    pub m1: Option<f64>,
    #[serde(default = "one_f64")]
    pub x0: f64,
    #[serde(default = "coupling_times")]
    pub times: Vec<f64>,
    /// "squared_norm" or "one_plus_squared_norm".
    #[serde(default = "squared_norm_str")]
    pub w: String,
}

fn squared_norm_str() -> String {
    "squared_norm".into()
}

impl Default for MomentsSpec {
    fn default() -> Self {
        MomentsSpec {
            m1: None,
            x0: 1.0,
            times: coupling_times(),
            w: squared_norm_str(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSpec {
    #[serde(default = "ten")]
    pub burn_in: f64,
    #[serde(default = "invariant_samples")]
    pub n_samples: usize,
    #[serde(default = "half")]
    pub thinning: f64,
}

fn ten() -> f64 {
    10.0
}

fn half() -> f64 {
    0.5
}

fn invariant_samples() -> usize {
    100_000
}

impl Default for InvariantSpec {
    fn default() -> Self {
        InvariantSpec { burn_in: ten(), n_samples: invariant_samples(), thinning: half() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    /// "w1", "w2" or "wtv".
    #[serde(default = "w2_str")]
    pub metric: String,
    #[serde(default)]
    pub x: f64,
    #[serde(default = "convergence_times")]
    pub times: Vec<f64>,
    /// Expected decay rate; defaults to the model's claimed M1.
    pub rate: Option<f64>,
}

fn w2_str() -> String {
    "w2".into()
}

fn convergence_times() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0]
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec { metric: w2_str(), x: 0.0, times: convergence_times(), rate: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkSpec {
    #[serde(default = "ck_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "ck_ss")]
    pub ss: Vec<f64>,
    #[serde(default = "one_f64")]
    pub x: f64,
    #[serde(default = "one_usize")]
    pub repeats: usize,
}

fn ck_taus() -> Vec<f64> {
    vec![0.0, 0.5]
}

fn ck_ss() -> Vec<f64> {
    vec![1.0, 2.0]
}

fn one_usize() -> usize {
    1
}

impl Default for CkSpec {
    fn default() -> Self {
        CkSpec { taus: ck_taus(), ss: ck_ss(), x: one_f64(), repeats: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitingSpec {
    /// Claimed M1 for the drift condition; defaults to twice the model's
    /// claimed monotonicity constant.
    pub m1: Option<f64>,
    #[serde(default = "one_f64")]
    pub x: f64,
    #[serde(default = "limiting_times")]
    pub times: Vec<f64>,
}

fn limiting_times() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}

impl Default for LimitingSpec {
    fn default() -> Self {
        LimitingSpec { m1: None, x: one_f64(), times: limiting_times() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MckeanSpec {
    #[serde(default = "two_f64")]
    pub a: f64,
    #[serde(default = "half")]
    pub c: f64,
    #[serde(default = "one_f64")]
    pub sigma: f64,
    #[serde(default = "mckean_particles")]
    pub n_particles: usize,
    #[serde(default = "one_f64")]
    pub x: f64,
    #[serde(default = "one_f64")]
    pub s: f64,
}

fn mckean_particles() -> usize {
    10_000
}

impl Default for MckeanSpec {
    fn default() -> Self {
        MckeanSpec {
            a: two_f64(),
            c: half(),
            sigma: one_f64(),
            n_particles: mckean_particles(),
            x: one_f64(),
            s: one_f64(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory: no wall-clock seeding.
    pub seed: u64,
    pub model: ModelSpec,
    #[serde(default)]
    pub test_functions: Vec<TestFunctionSpec>,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub x_grid: Vec<XPoint>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub checks: Vec<CheckKind>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub envelope: EnvelopeSpec,
    #[serde(default)]
    pub assumptions: AssumptionSpec,
    #[serde(default)]
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub moments: MomentsSpec,
    #[serde(default)]
    pub invariant: InvariantSpec,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
    #[serde(default)]
    pub ck: CkSpec,
    #[serde(default)]
    pub limiting: LimitingSpec,
    #[serde(default)]
    pub mckean: MckeanSpec,
}

fn default_n_paths() -> usize {
    10_000
}

fn default_dt() -> f64 {
    1e-3
}

impl ExperimentConfig {
    /// Parses TOML (primary) or JSON (by extension or as fallback).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text).with_context(|| "parsing JSON config")?
        } else {
            match toml::from_str(&text) {
                Ok(cfg) => cfg,
                Err(toml_err) => serde_json::from_str(&text)
                    .map_err(|_| anyhow!("parsing TOML config: {toml_err}"))?,
            }
        };
        Ok(cfg)
    }

    pub fn tolerance(&self, check: &str, default: f64) -> f64 {
        self.tolerances.get(check).copied().unwrap_or(default)
    }

    /// Resolves and validates names and ranges; returns the catalog entry.
    pub fn validate(&self, registry: &ModelRegistry) -> Result<ModelCatalogEntry> {
        let entry = registry
            .build(&self.model.name, &self.model.params)
            .map_err(|e| anyhow!("model.name: {e}"))?;
        let dim = entry.coefficients.dim();
        for (i, tf) in self.test_functions.iter().enumerate() {
            tf.build(dim, &format!("test_functions[{i}]"))?;
        }
        if !(self.dt > 0.0) {
            bail!("dt: must be positive, got {}", self.dt);
        }
        if self.n_paths == 0 {
            bail!("n_paths: must be >= 1");
        }
        if self.checks.contains(&CheckKind::Envelope) {
            if self.times.is_empty() {
                bail!("times: envelope checks need a nonempty time list");
            }
            if self.times.iter().any(|&t| t <= 1.0) {
                bail!("times: envelope times must lie in (1, inf)");
            }
        }
        for (i, x) in self.x_grid.iter().enumerate() {
            if x.to_vec().len() != dim {
                bail!("x_grid[{i}]: dimension {} does not match model dim {dim}", x.to_vec().len());
            }
        }
        Ok(entry)
    }

    pub fn resolved_x_grid(&self, dim: usize) -> Vec<Vec<f64>> {
        if self.x_grid.is_empty() {
            decay_core::sensitivity::default_x_grid(dim)
        } else {
            self.x_grid.iter().map(|x| x.to_vec()).collect()
        }
    }

    pub fn resolved_test_functions(&self) -> Vec<TestFunctionSpec> {
        if self.test_functions.is_empty() {
            vec![TestFunctionSpec::default()]
        } else {
            self.test_functions.clone()
        }
    }
}
