//! Simulation scenarios: data generation, pseudo-true coefficients, test
//! deviance and replicate sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineEstimate, DmlOptions, PropensityKind};
use crate::debias::{DebiasOptions, ProposedOptions};
use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmOptions};
use crate::seeds;
use crate::surrogate::{Dataset, FirstStageOptions};

/// Coordinates with intervals in the reported tables.
pub const REPORTED_COORDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Continuous,
    Binary,
}

impl Outcome {
    pub fn family(self) -> Family {
        match self {
            Outcome::Continuous => Family::Gaussian,
            Outcome::Binary => Family::Binomial,
        }
    }

    pub fn default_delta(self) -> f64 {
        match self {
            Outcome::Continuous => 0.5,
            Outcome::Binary => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Continuous => "continuous",
            Outcome::Binary => "binary",
        }
    }
}

/// Reading of the `N(0, 2)` outcome noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// Variance 2, standard deviation √2.
    #[default]
    Variance,
    /// Standard deviation 2.
    StdDev,
}

impl NoiseScale {
    pub fn sd(self) -> f64 {
        match self {
            NoiseScale::Variance => 2f64.sqrt(),
            NoiseScale::StdDev => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseScale::Variance => "variance",
            NoiseScale::StdDev => "std_dev",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-fitted AIPW, kernel propensity.
    Baseline1,
    /// Cross-fitted AIPW, logistic propensity.
    Baseline2,
    ProposedNoZ,
    ProposedWithZ,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline1, Method::Baseline2, Method::ProposedNoZ, Method::ProposedWithZ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline1 => "baseline1",
            Method::Baseline2 => "baseline2",
            Method::ProposedNoZ => "proposed_no_z",
            Method::ProposedWithZ => "proposed_with_z",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

fn default_p() -> usize {
    8
}
fn default_replicates() -> usize {
    200
}
fn default_b_reps() -> usize {
    200
}
fn default_k_folds() -> usize {
    5
}
fn default_test_n() -> usize {
    10_000
}
fn default_oracle_n() -> usize {
    1_000_000
}
fn default_seed() -> u64 {
    20_240_601
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub outcome: Outcome,
    /// Marginal `P(R = 0)`.
    pub missing_rate: f64,
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    /// Surrogate strength; the outcome-type default when absent.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_b_reps")]
    pub b_reps: usize,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default = "default_oracle_n")]
    pub oracle_n: usize,
    #[serde(default)]
    pub noise: NoiseScale,
}

impl ScenarioConfig {
    pub fn new(outcome: Outcome, missing_rate: f64, n: usize) -> Self {
        Self {
            name: None,
            outcome,
            missing_rate,
            n,
            p: default_p(),
            delta: None,
            n_replicates: default_replicates(),
            b_reps: default_b_reps(),
            k_folds: default_k_folds(),
            master_seed: default_seed(),
            test_n: default_test_n(),
            oracle_n: default_oracle_n(),
            noise: NoiseScale::default(),
        }
    }

    /// The eight scenarios of the benchmark grid.
    pub fn grid() -> Vec<ScenarioConfig> {
        let mut out = Vec::new();
        for outcome in [Outcome::Continuous, Outcome::Binary] {
            for missing_rate in [0.5, 0.9] {
                for n in [500, 1000] {
                    out.push(ScenarioConfig::new(outcome, missing_rate, n));
                }
            }
        }
        out
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| self.outcome.default_delta())
    }

    pub fn family(&self) -> Family {
        self.outcome.family()
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!("{}_miss{}_n{}", self.outcome.name(), self.missing_rate, self.n)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.missing_rate > 0.0 && self.missing_rate < 1.0) {
            return Err(Error::InvalidArgument(format!("missing_rate {} outside (0, 1)", self.missing_rate)));
        }
        if self.p < 5 {
            return Err(Error::InvalidArgument(format!("p = {} leaves no nonlinear coordinates", self.p)));
        }
        if self.n <= self.p + 1 {
            return Err(Error::InvalidArgument(format!("n = {} too small for p = {}", self.n, self.p)));
        }
        if self.k_folds < 2 {
            return Err(Error::InvalidArgument(format!("k_folds = {}", self.k_folds)));
        }
        if self.b_reps == 1 {
            return Err(Error::InvalidArgument("b_reps must be 0 or at least 2".into()));
        }
        if self.test_n == 0 || self.oracle_n == 0 {
            return Err(Error::InvalidArgument("test_n and oracle_n must be positive".into()));
        }
        if !self.delta().is_finite() {
            return Err(Error::InvalidArgument("delta must be finite".into()));
        }
        Ok(())
    }

    /// Everything the pseudo-true coefficient depends on.
    pub fn oracle_key(&self, oracle_seed: u64) -> String {
        format!(
            "{}_miss{}_p{}_noise-{}_n{}_seed{}",
            self.outcome.name(),
            self.missing_rate,
            self.p,
            self.noise.name(),
            self.oracle_n,
            oracle_seed
        )
    }

    pub fn proposed_options(&self) -> ProposedOptions {
        ProposedOptions {
            first: FirstStageOptions::default(),
            debias: DebiasOptions { k_folds: self.k_folds, ..Default::default() },
        }
    }

    pub fn dml_options(&self) -> DmlOptions {
        DmlOptions { k_folds: self.k_folds, ..Default::default() }
    }
}

/// `(1, 1, −1, −1, 0, …, 0)`.
pub fn beta0(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |j, _| match j {
        0 | 1 => 1.0,
        2 | 3 => -1.0,
        _ => 0.0,
    })
}

/// Rows with every variable present.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSample {
    pub x: DMatrix<f64>,
    pub z: Vec<f64>,
    pub r: Vec<bool>,
    pub y: Vec<f64>,
}

/// Draw `n` complete rows.
pub fn generate_full(cfg: &ScenarioConfig, n: usize, seed: u64) -> FullSample {
    let p = cfg.p;
    let b0 = beta0(p);
    let noise = Normal::new(0.0, cfg.noise.sd()).expect("positive sd");
    let wide = 1.5f64.sqrt();
    let delta = cfg.delta();
    let mut rng = seeds::rng(seed);

    let mut x = DMatrix::zeros(n, p);
    let mut z = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let ri = rng.gen_bool(1.0 - cfg.missing_rate);
        // Second mixture component: mean one, variance 1.5 per coordinate.
        let wide_component = ri && !rng.gen_bool(0.7);
        for j in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = if wide_component { 1.0 + wide * e } else { e };
        }
        let lin: f64 = (0..p).map(|j| x[(i, j)] * b0[j]).sum();
        let bump: f64 = (4..p.min(8)).map(|j| x[(i, j)].abs()).sum::<f64>() / 4.0;
        let eps = noise.sample(&mut rng);
        let yi = match cfg.outcome {
            Outcome::Continuous => lin + bump + eps,
            Outcome::Binary => f64::from(u8::from(0.5 * lin + bump + eps > 0.0)),
        };
        let ez: f64 = StandardNormal.sample(&mut rng);
        z.push(delta * lin + bump + ez);
        r.push(ri);
        y.push(yi);
    }
    FullSample { x, z, r, y }
}

/// One observed-data sample of size `cfg.n`.
pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let s = generate_full(cfg, cfg.n, seed);
    Dataset::new(s.x, Some(s.z), s.r, s.y)
}

/// Pseudo-true coefficients with sandwich Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBeta {
    pub beta: DVector<f64>,
    pub se: DVector<f64>,
    pub key: String,
}

/// `argmin E[ℓ(β)]` over fully observed draws, ignoring `R`.
pub fn oracle_beta_star(cfg: &ScenarioConfig, oracle_n: usize, seed: u64) -> Result<OracleBeta> {
    let s = generate_full(cfg, oracle_n, seed);
    let family = cfg.family();
    let fit = glm::fit_glm(&s.x, &s.y, family, GlmOptions::default())?;
    if !fit.converged {
        return Err(Error::NonFinite(format!("oracle fit stopped at gradient {:.3e}", fit.final_gradient_norm)));
    }
    let hess = glm::mean_hessian(&s.x, &fit.beta, family);
    let eta = &s.x * &fit.beta;
    let meat = glm::weighted_gram(&s.x, eta.iter().zip(&s.y).map(|(&t, &y)| (family.b_prime(t) - y).powi(2)));
    let h_inv = hess
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("oracle Hessian".into()))?;
    let cov = &h_inv * meat * &h_inv / oracle_n as f64;
    let se = DVector::from_fn(cfg.p, |j, _| cov[(j, j)].sqrt());
    let mut cfg_key = cfg.clone();
    cfg_key.oracle_n = oracle_n;
    Ok(OracleBeta { beta: fit.beta, se, key: cfg_key.oracle_key(seed) })
}

/// Default seed for oracle draws, shared across scenarios.
pub const ORACLE_SEED: u64 = 0x5eed_0_0ac1e;

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("oracle_{key}.csv"))
}

/// Cached oracle lookup: read `dir/oracle_<key>.csv` if present, otherwise
/// compute and write it. Returns the value and whether it came from disk.
pub fn oracle_cached(cfg: &ScenarioConfig, seed: u64, dir: &Path) -> Result<(OracleBeta, bool)> {
    let key = cfg.oracle_key(seed);
    let path = cache_path(dir, &key);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Some(o) = parse_oracle(&text, cfg.p, &key) {
            return Ok((o, true));
        }
    }
    let o = oracle_beta_star(cfg, cfg.oracle_n, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("cache dir {}: {e}", dir.display())))?;
    fs::write(&path, format_oracle(&o)).map_err(|e| Error::InvalidArgument(format!("write {}: {e}", path.display())))?;
    Ok((o, false))
}

pub fn format_oracle(o: &OracleBeta) -> String {
    let mut s = format!("# key={}\ncoord,beta_star,mc_se\n", o.key);
    for j in 0..o.beta.len() {
        s.push_str(&format!("{},{},{}\n", j + 1, o.beta[j], o.se[j]));
    }
    s
}

fn parse_oracle(text: &str, p: usize, key: &str) -> Option<OracleBeta> {
    let mut lines = text.lines();
    if lines.next()? != format!("# key={key}") {
        return None;
    }
    lines.next()?;
    let mut beta = Vec::new();
    let mut se = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        cells.next()?;
        beta.push(cells.next()?.parse().ok()?);
        se.push(cells.next()?.parse().ok()?);
    }
    (beta.len() == p).then(|| OracleBeta {
        beta: DVector::from_vec(beta),
        se: DVector::from_vec(se),
        key: key.to_string(),
    })
}

/// Fresh fully observed sample for deviance evaluation.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub family: Family,
}

impl TestSet {
    pub fn draw(cfg: &ScenarioConfig, n: usize, seed: u64) -> Self {
        let s = generate_full(cfg, n, seed);
        Self { x: s.x, y: s.y, family: cfg.family() }
    }

    /// Mean deviance loss and its Monte Carlo standard error.
    pub fn deviance_with_se(&self, beta: &DVector<f64>) -> (f64, f64) {
        let eta = &self.x * beta;
        let losses: Vec<f64> = eta.iter().zip(&self.y).map(|(&t, &y)| self.family.b(t) - y * t).collect();
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    pub fn deviance(&self, beta: &DVector<f64>) -> f64 {
        glm::mean_deviance(&self.x, &self.y, beta, self.family)
    }
}

/// Mean deviance of `beta` on `cfg.test_n` fresh rows.
pub fn test_deviance(beta: &DVector<f64>, cfg: &ScenarioConfig, seed: u64) -> f64 {
    TestSet::draw(cfg, cfg.test_n, seed).deviance(beta)
}

/// One table row: a method's result for one coordinate in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario: String,
    pub method: Method,
    pub replicate: usize,
    /// One-based coefficient index.
    pub coord: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub oracle: f64,
    pub covered: bool,
    pub deviance: f64,
    pub d: usize,
    /// Trimmed-weight share (proposed) or clipped-propensity share (AIPW).
    pub trim_or_clip: f64,
    pub unstable_bootstrap: bool,
    pub error: String,
}

impl ReplicateResult {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

pub fn covers(ci_low: f64, ci_high: f64, truth: f64) -> bool {
    ci_low <= truth && truth <= ci_high
}

/// Fit one method on one replicate.
pub fn run_method(
    method: Method,
    data: &Dataset,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<BaselineEstimate> {
    let family = cfg.family();
    let all: Vec<usize> = (0..cfg.p).collect();
    let reported: Vec<usize> = (0..REPORTED_COORDS.min(cfg.p)).collect();
    match method {
        Method::Baseline1 => baselines::fit_dml(data, family, PropensityKind::Kernel, cfg.dml_options(), cfg.b_reps, seed),
        Method::Baseline2 => baselines::fit_dml(data, family, PropensityKind::Logistic, cfg.dml_options(), cfg.b_reps, seed),
        Method::ProposedNoZ => {
            baselines::fit_proposed_no_z(data, family, &all, &reported, cfg.proposed_options(), cfg.b_reps, seed)
        }
        Method::ProposedWithZ => {
            baselines::proposed_summary(data, family, &all, &reported, cfg.proposed_options(), cfg.b_reps, seed)
        }
    }
}

/// Seed of replicate `r`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    seeds::derive_labeled(master, "replicate", r as u64)
}

/// All rows of one replicate.
pub fn run_replicate(cfg: &ScenarioConfig, methods: &[Method], oracle: &DVector<f64>, r: usize) -> Vec<ReplicateResult> {
    let seed = replicate_seed(cfg.master_seed, r);
    let scenario = cfg.label();
    let coords = REPORTED_COORDS.min(cfg.p);
    let data = generate(cfg, seeds::derive_labeled(seed, "data", 0));
    let test = TestSet::draw(cfg, cfg.test_n, seeds::derive_labeled(seed, "test", 0));
    let mut rows = Vec::with_capacity(methods.len() * coords);
    for &method in methods {
        let outcome = data
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|d| run_method(method, d, cfg, seeds::derive_labeled(seed, method.name(), 0)));
        for j in 0..coords {
            let row = match &outcome {
                Ok(est) => {
                    let (lo, hi) = est.per_coordinate_ci[j].unwrap_or((f64::NAN, f64::NAN));
                    ReplicateResult {
                        scenario: scenario.clone(),
                        method,
                        replicate: r,
                        coord: j + 1,
                        estimate: est.beta[j],
                        ci_low: lo,
                        ci_high: hi,
                        oracle: oracle[j],
                        covered: covers(lo, hi, oracle[j]),
                        deviance: test.deviance(&est.beta),
                        d: est.d,
                        trim_or_clip: est.clip_fraction,
                        unstable_bootstrap: est.unstable_bootstrap,
                        error: String::new(),
                    }
                }
                Err(e) => ReplicateResult {
                    scenario: scenario.clone(),
                    method,
                    replicate: r,
                    coord: j + 1,
                    estimate: f64::NAN,
                    ci_low: f64::NAN,
                    ci_high: f64::NAN,
                    oracle: oracle[j],
                    covered: false,
                    deviance: f64::NAN,
                    d: 0,
                    trim_or_clip: f64::NAN,
                    unstable_bootstrap: false,
                    error: error_label(e),
                },
            };
            rows.push(row);
        }
    }
    rows
}

/// Short machine-readable error label.
pub fn error_label(e: &Error) -> String {
    let kind = match e {
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::SingularDesign(_) => "singular_design",
        Error::InsufficientData(_) => "insufficient_data",
        Error::DegenerateScale(_) => "degenerate_scale",
        Error::DegenerateInformation(_) => "degenerate_information",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Bootstrap(_) => "bootstrap",
    };
    format!("{kind}: {}", e.to_string().replace(['\n', ','], " "))
}

/// Every replicate of one scenario, in replicate order.
pub fn run_scenario(cfg: &ScenarioConfig, methods: &[Method], oracle: &DVector<f64>) -> Result<Vec<ReplicateResult>> {
    cfg.validate()?;
    if oracle.len() != cfg.p {
        return Err(Error::DimensionMismatch(format!("oracle has {} entries, p = {}", oracle.len(), cfg.p)));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    Ok((0..cfg.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &methods, oracle, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// Table-1 style summary for one method and coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenario: String,
    pub method: Method,
    pub coord: usize,
    pub replicates: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// `NaN` when no intervals were computed.
    pub coverage: f64,
    pub mean_estimate: f64,
    pub sd_estimate: f64,
    pub bias: f64,
    pub mean_ci_width: f64,
    pub deviance_mean: f64,
    pub deviance_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { f64::NAN };
    (mean, sd)
}

/// Aggregates in (method, coord) order.
pub fn aggregate(rows: &[ReplicateResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Method, usize)> = rows.iter().map(|r| (r.scenario.clone(), r.method, r.coord)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(scenario, method, coord)| {
            let group: Vec<&ReplicateResult> =
                rows.iter().filter(|r| r.scenario == scenario && r.method == method && r.coord == coord).collect();
            let ok: Vec<&&ReplicateResult> = group.iter().filter(|r| !r.failed()).collect();
            let with_ci: Vec<&&&ReplicateResult> = ok.iter().filter(|r| r.ci_low.is_finite() && r.ci_high.is_finite()).collect();
            let coverage = if with_ci.is_empty() {
                f64::NAN
            } else {
                with_ci.iter().filter(|r| r.covered).count() as f64 / with_ci.len() as f64
            };
            let est: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
            let dev: Vec<f64> = ok.iter().map(|r| r.deviance).collect();
            let widths: Vec<f64> = with_ci.iter().map(|r| r.ci_high - r.ci_low).collect();
            let (mean_estimate, sd_estimate) = mean_sd(&est);
            let (deviance_mean, deviance_sd) = mean_sd(&dev);
            let oracle = group.first().map_or(f64::NAN, |r| r.oracle);
            let failures = group.len() - ok.len();
            Aggregate {
                scenario,
                method,
                coord,
                replicates: group.len(),
                failures,
                failure_rate: failures as f64 / group.len().max(1) as f64,
                coverage,
                mean_estimate,
                sd_estimate,
                bias: mean_estimate - oracle,
                mean_ci_width: mean_sd(&widths).0,
                deviance_mean,
                deviance_sd,
            }
        })
        .collect()
}
