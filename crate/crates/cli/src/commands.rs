//! The three subcommands: `simulate`, `analyze` and `oracle`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use surrogate_debias::debias::{self, ProposedOptions, ResampleSeeding};
use surrogate_debias::sim::{self, Method, ReplicateResult, ScenarioConfig};
use surrogate_debias::surrogate::FirstStageOptions;
use surrogate_debias::{seeds, Dataset, VERSION};

use crate::config::{Config, UsageError};

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: String,
    pub output_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub full_scale: bool,
    pub overrides: Vec<String>,
    /// Reading of the outcome-noise parameter per scenario.
    pub noise: BTreeMap<String, String>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: &Path, output_dir: &Path, overrides: &[String]) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_path: config_path.display().to_string(),
            output_dir: output_dir.display().to_string(),
            seed: None,
            data_path: None,
            target: None,
            full_scale: false,
            overrides: overrides.to_vec(),
            noise: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.toml");
        fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub full_scale: bool,
    pub overrides: Vec<String>,
}

pub struct AnalyzeArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
    pub target: String,
    pub overrides: Vec<String>,
}

pub struct OracleArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Methods × coefficients layout of the coverage table.
#[derive(Debug, Serialize)]
struct CoverageRow {
    scenario: String,
    outcome: String,
    missing_rate: f64,
    n: usize,
    method: Method,
    coverage_beta1: f64,
    coverage_beta2: f64,
    coverage_beta3: f64,
    coverage_beta4: f64,
    deviance_mean: f64,
    deviance_sd: f64,
    failure_rate: f64,
}

#[derive(Debug, Serialize)]
struct DevianceRow {
    scenario: String,
    outcome: String,
    missing_rate: f64,
    n: usize,
    method: Method,
    replicate: usize,
    deviance: f64,
}

#[derive(Debug, Serialize)]
struct OracleRow {
    scenario: String,
    coord: usize,
    beta_star: f64,
    mc_se: f64,
}

fn apply_scale(cfg: &mut Config, seed: Option<u64>, full_scale: bool) {
    for s in cfg.scenario.iter_mut() {
        if full_scale {
            s.n_replicates = 500;
            s.b_reps = 500;
        }
        if let Some(seed) = seed {
            s.master_seed = seeds::derive_labeled(seed, &s.label(), 0);
        }
    }
}

fn coverage_rows(s: &ScenarioConfig, rows: &[ReplicateResult]) -> Vec<CoverageRow> {
    let agg = sim::aggregate(rows);
    let mut methods: Vec<Method> = agg.iter().map(|a| a.method).collect();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let cov = |c: usize| agg.iter().find(|a| a.method == m && a.coord == c).map_or(f64::NAN, |a| a.coverage);
            let first = agg.iter().find(|a| a.method == m && a.coord == 1);
            CoverageRow {
                scenario: s.label(),
                outcome: s.outcome.name().to_string(),
                missing_rate: s.missing_rate,
                n: s.n,
                method: m,
                coverage_beta1: cov(1),
                coverage_beta2: cov(2),
                coverage_beta3: cov(3),
                coverage_beta4: cov(4),
                deviance_mean: first.map_or(f64::NAN, |a| a.deviance_mean),
                deviance_sd: first.map_or(f64::NAN, |a| a.deviance_sd),
                failure_rate: first.map_or(f64::NAN, |a| a.failure_rate),
            }
        })
        .collect()
}

/// Run every configured scenario and write result tables.
pub fn simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let mut cfg = Config::load(&args.config, &args.overrides)?;
    if cfg.scenario.is_empty() {
        return Err(UsageError(format!("{}: no [[scenario]] tables", args.config.display())).into());
    }
    apply_scale(&mut cfg, args.seed, args.full_scale);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let cache = cfg.run.oracle_cache.clone().unwrap_or_else(|| args.out.join("oracle"));

    let mut manifest = RunManifest::new("simulate", &args.config, &args.out, &args.overrides);
    manifest.seed = args.seed;
    manifest.full_scale = args.full_scale;

    let mut table = Vec::new();
    let mut deviance = Vec::new();
    let mut oracle_rows = Vec::new();
    for s in &cfg.scenario {
        let label = s.label();
        manifest.noise.insert(
            label.clone(),
            format!("{} (sd {})", s.noise.name(), s.noise.sd()),
        );
        let (oracle, _) = sim::oracle_cached(s, cfg.run.oracle_seed, &cache)
            .with_context(|| format!("oracle for {label}"))?;
        for j in 0..s.p {
            oracle_rows.push(OracleRow { scenario: label.clone(), coord: j + 1, beta_star: oracle.beta[j], mc_se: oracle.se[j] });
        }
        let rows = sim::run_scenario(s, &cfg.run.methods, &oracle.beta)?;
        let stem = file_stem(&label);
        let results = format!("results_{stem}.csv");
        let aggregates = format!("aggregates_{stem}.csv");
        write_csv(&args.out.join(&results), &rows)?;
        write_csv(&args.out.join(&aggregates), &sim::aggregate(&rows))?;
        manifest.files.push(results);
        manifest.files.push(aggregates);

        table.extend(coverage_rows(s, &rows));
        deviance.extend(rows.iter().filter(|r| r.coord == 1).map(|r| DevianceRow {
            scenario: label.clone(),
            outcome: s.outcome.name().to_string(),
            missing_rate: s.missing_rate,
            n: s.n,
            method: r.method,
            replicate: r.replicate,
            deviance: r.deviance,
        }));
    }
    for (name, ok) in [
        ("coverage_table.csv", write_csv(&args.out.join("coverage_table.csv"), &table)),
        ("deviance_long.csv", write_csv(&args.out.join("deviance_long.csv"), &deviance)),
        ("oracle_beta.csv", write_csv(&args.out.join("oracle_beta.csv"), &oracle_rows)),
    ] {
        ok?;
        manifest.files.push(name.to_string());
    }
    manifest.write(&args.out)?;
    Ok(manifest)
}

/// Compute or reuse the cached oracle coefficients of every scenario.
/// Returns the manifest and, per scenario, whether the cache was hit.
pub fn oracle(args: &OracleArgs) -> Result<(RunManifest, Vec<(String, bool)>)> {
    let cfg = Config::load(&args.config, &args.overrides)?;
    if cfg.scenario.is_empty() {
        return Err(UsageError(format!("{}: no [[scenario]] tables", args.config.display())).into());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = RunManifest::new("oracle", &args.config, &args.out, &args.overrides);
    let mut hits = Vec::new();
    for s in &cfg.scenario {
        let (o, hit) = sim::oracle_cached(s, cfg.run.oracle_seed, &args.out)?;
        manifest.noise.insert(s.label(), format!("{} (sd {})", s.noise.name(), s.noise.sd()));
        manifest.files.push(format!("oracle_{}.csv", o.key));
        hits.push((s.label(), hit));
    }
    manifest.write(&args.out)?;
    Ok((manifest, hits))
}

/// Parsed analysis input.
#[derive(Debug, Clone)]
pub struct AnalysisInput {
    pub data: Dataset,
    pub covariates: Vec<String>,
    pub rejected: Vec<Rejected>,
    pub total_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejected {
    /// One-based line in the input file, header included.
    pub line: u64,
    pub reason: String,
    pub record: String,
}

fn parse_cell(raw: &str, column: &str) -> std::result::Result<f64, String> {
    let t = raw.trim();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("column '{column}': non-numeric value '{t}'")),
    }
}

/// Covariates, surrogate and outcome of one row.
type ParsedRow = (Vec<f64>, Option<f64>, Option<f64>);

/// Read the analysis CSV. Blank outcomes mark missing rows; rows with any
/// other unusable cell are rejected.
pub fn read_analysis_csv(path: &Path, section: &crate::config::AnalyzeSection) -> Result<AnalysisInput> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| UsageError(format!("{}: no column named '{name}'", path.display())).into())
    };
    let y_col = index(&section.outcome)?;
    let z_col = section.surrogate.as_deref().map(index).transpose()?;
    let x_cols: Vec<usize> = section.covariates.iter().map(|c| index(c)).collect::<Result<_>>()?;
    if x_cols.is_empty() {
        return Err(UsageError("analyze.covariates is empty".into()).into());
    }

    let (mut xs, mut zs, mut rs, mut ys) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut rejected = Vec::new();
    let mut total = 0;
    for record in reader.records() {
        let record = record?;
        total += 1;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |k: usize| record.get(k).unwrap_or("");
        let parsed = (|| -> std::result::Result<ParsedRow, String> {
            let x = x_cols
                .iter()
                .zip(&section.covariates)
                .map(|(&k, name)| parse_cell(cell(k), name))
                .collect::<std::result::Result<Vec<f64>, String>>()?;
            let z = match z_col {
                Some(k) => Some(parse_cell(cell(k), section.surrogate.as_deref().unwrap_or(""))?),
                None => None,
            };
            let raw_y = cell(y_col).trim();
            let y = if raw_y.is_empty() { None } else { Some(parse_cell(raw_y, &section.outcome)?) };
            Ok((x, z, y))
        })();
        match parsed {
            Ok((x, z, y)) => {
                xs.extend(x);
                if let Some(z) = z {
                    zs.push(z);
                }
                rs.push(y.is_some());
                ys.push(y.unwrap_or(f64::NAN));
            }
            Err(reason) => rejected.push(Rejected { line, reason, record: record.iter().collect::<Vec<_>>().join(",") }),
        }
    }
    if total == 0 {
        return Err(UsageError(format!("{}: no data rows", path.display())).into());
    }
    if rejected.len() * 2 > total {
        bail!(
            "{} of {} rows rejected (more than half); see rejects.csv",
            rejected.len(),
            total
        );
    }
    let p = x_cols.len();
    let n = rs.len();
    let x = DMatrix::from_row_slice(n, p, &xs);
    let z = z_col.map(|_| zs);
    let data = Dataset::new(x, z, rs, ys)?;
    Ok(AnalysisInput { data, covariates: section.covariates.clone(), rejected, total_rows: total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub coord: usize,
    pub covariate: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub beta_init: f64,
    pub trim_fraction: f64,
    pub negative_weight_fraction: f64,
    pub d: usize,
    pub missing_rate: f64,
    pub n: usize,
    pub n_observed: usize,
    pub n_rejected: usize,
    pub bootstrap_redraws: usize,
    pub unstable_bootstrap: bool,
}

pub fn parse_targets(raw: &str, p: usize) -> Result<Vec<usize>> {
    if raw.trim().eq_ignore_ascii_case("all") {
        return Ok((0..p).collect());
    }
    raw.split(',')
        .map(|t| {
            let k: usize = t
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("target '{t}' is not a coordinate or 'all'")))?;
            if k == 0 || k > p {
                return Err(UsageError(format!("target {k} outside 1..={p}")).into());
            }
            Ok(k - 1)
        })
        .collect()
}

/// Run the estimator on user data and write `report.csv`.
pub fn analyze(args: &AnalyzeArgs) -> Result<(RunManifest, Vec<ReportRow>)> {
    let cfg = Config::load(&args.config, &args.overrides)?;
    let section = cfg
        .analyze
        .clone()
        .ok_or_else(|| UsageError(format!("{}: missing [analyze] section", args.config.display())))?;
    let family = section.family()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = RunManifest::new("analyze", &args.config, &args.out, &args.overrides);
    manifest.data_path = Some(args.data.display().to_string());
    manifest.target = Some(args.target.clone());
    manifest.seed = Some(section.seed);

    let input = match read_analysis_csv(&args.data, &section) {
        Ok(i) => i,
        Err(e) => {
            // Still leave the rejects behind when the abort is about rejections.
            if let Ok(partial) = collect_rejects(&args.data, &section) {
                write_csv(&args.out.join("rejects.csv"), &partial)?;
            }
            return Err(e);
        }
    };
    write_csv(&args.out.join("rejects.csv"), &input.rejected)?;
    manifest.files.push("rejects.csv".into());

    let data = &input.data;
    let targets = parse_targets(&args.target, data.p())?;
    let opts = ProposedOptions {
        first: FirstStageOptions { d: section.d, d_max: section.d_max, ..Default::default() },
        debias: debias::DebiasOptions { k_folds: section.k_folds, ..Default::default() },
    };
    let estimates = if section.b_reps >= 2 {
        debias::bootstrap_inference_multi(data, family, &targets, opts, section.b_reps, section.seed, ResampleSeeding::Independent)?
    } else {
        debias::proposed_point_estimates(data, family, &targets, opts, section.seed)?.1
    };
    let rows: Vec<ReportRow> = estimates
        .iter()
        .map(|e| ReportRow {
            coord: e.target + 1,
            covariate: input.covariates[e.target].clone(),
            estimate: e.beta_tilde,
            se: e.se.unwrap_or(f64::NAN),
            ci_low: e.ci.map_or(f64::NAN, |c| c.0),
            ci_high: e.ci.map_or(f64::NAN, |c| c.1),
            beta_init: e.beta_init[e.target],
            trim_fraction: e.diagnostics.trim_fraction,
            negative_weight_fraction: e.diagnostics.negative_weight_fraction,
            d: e.diagnostics.d,
            missing_rate: data.missing_rate(),
            n: data.n(),
            n_observed: data.observed_count(),
            n_rejected: input.rejected.len(),
            bootstrap_redraws: e.diagnostics.bootstrap_redraws,
            unstable_bootstrap: e.diagnostics.unstable_bootstrap,
        })
        .collect();
    write_csv(&args.out.join("report.csv"), &rows)?;
    manifest.files.push("report.csv".into());
    manifest.write(&args.out)?;
    Ok((manifest, rows))
}

fn collect_rejects(path: &Path, section: &crate::config::AnalyzeSection) -> Result<Vec<Rejected>> {
    // Re-read leniently: a large rejection share aborts the strict reader.
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let pos = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut cols: Vec<(usize, &str)> = Vec::new();
    for name in section.covariates.iter().map(String::as_str).chain(section.surrogate.as_deref()) {
        if let Some(k) = pos(name) {
            cols.push((k, name));
        }
    }
    let y_col = pos(&section.outcome);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut reason = cols
            .iter()
            .find_map(|&(k, name)| parse_cell(record.get(k).unwrap_or(""), name).err());
        if reason.is_none() {
            if let Some(k) = y_col {
                let raw = record.get(k).unwrap_or("").trim();
                if !raw.is_empty() {
                    reason = parse_cell(raw, &section.outcome).err();
                }
            }
        }
        if let Some(reason) = reason {
            out.push(Rejected { line, reason, record: record.iter().collect::<Vec<_>>().join(",") });
        }
    }
    Ok(out)
}

/// Write a dataset in the layout `analyze` reads: `y` (blank when missing),
/// `z`, `x1..xp`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string()];
    if data.z().is_some() {
        header.push("z".into());
    }
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y(i).map_or(String::new(), |v| v.to_string())];
        if let Some(z) = data.z() {
            rec.push(z[i].to_string());
        }
        rec.extend((0..data.p()).map(|j| data.x()[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Machine-readable failure record.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    pub version: String,
}

pub fn write_error_file(dir: &Path, kind: &str, message: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("error.toml");
    let rec = ErrorRecord { kind: kind.to_string(), message: message.to_string(), version: VERSION.to_string() };
    fs::write(&path, toml::to_string(&rec)?)?;
    Ok(path)
}
