//! TOML run configuration with `key=value` overrides.
//!
//! ```toml
//! [run]
//! methods = ["baseline1", "proposed_with_z"]
//!
//! [[scenario]]
//! outcome = "continuous"
//! missing_rate = 0.5
//! n = 500
//! n_replicates = 2
//! b_reps = 2
//!
//! [analyze]
//! family = "gaussian"
//! outcome = "y"
//! surrogate = "z"
//! covariates = ["x1", "x2"]
//! ```
//!
//! Overrides have the form `section.key=value` where `section` is `run`,
//! `analyze` or `scenario` (applied to every scenario); `value` is a TOML
//! literal, or a bare string.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surrogate_debias::sim::{Method, ScenarioConfig, ORACLE_SEED};
use surrogate_debias::Family;

/// Bad input from the user: configuration, flags or data layout.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn oracle_seed() -> u64 {
    ORACLE_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "oracle_seed")]
    pub oracle_seed: u64,
    /// Oracle cache directory; `<out>/oracle` when absent.
    #[serde(default)]
    pub oracle_cache: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { methods: all_methods(), oracle_seed: ORACLE_SEED, oracle_cache: None }
    }
}

fn default_b_reps() -> usize {
    200
}
fn default_k_folds() -> usize {
    5
}
fn default_d_max() -> usize {
    2
}
fn default_analyze_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// `gaussian` or `binomial`.
    pub family: String,
    pub outcome: String,
    #[serde(default)]
    pub surrogate: Option<String>,
    pub covariates: Vec<String>,
    #[serde(default = "default_b_reps")]
    pub b_reps: usize,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_analyze_seed")]
    pub seed: u64,
    /// Fixed reduced dimension; chosen by cross-validation when absent.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
}

impl AnalyzeSection {
    pub fn family(&self) -> Result<Family, UsageError> {
        self.family
            .parse()
            .map_err(|e| UsageError(format!("analyze.family: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub scenario: Vec<ScenarioConfig>,
    #[serde(default)]
    pub analyze: Option<AnalyzeSection>,
}

impl Config {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, UsageError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| UsageError(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("config: {e}")))?;
        for (k, s) in cfg.scenario.iter().enumerate() {
            s.validate().map_err(|e| UsageError(format!("scenario[{k}] ({}): {e}", s.label())))?;
        }
        let mut labels: Vec<String> = cfg.scenario.iter().map(|s| s.label()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(UsageError("scenario labels must be unique; set `name` to disambiguate".into()));
        }
        if let Some(a) = &cfg.analyze {
            a.family()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, entry: &str) -> Result<(), UsageError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override '{entry}' is not key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| UsageError(format!("override key '{key}' needs a section (run., analyze., scenario.)")))?;
    let value = parse_literal(raw.trim());
    match section {
        "run" | "analyze" => {
            let entry = root
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let table = entry
                .as_table_mut()
                .ok_or_else(|| UsageError(format!("[{section}] is not a table")))?;
            table.insert(field.to_string(), value);
        }
        "scenario" => {
            let list = root
                .get_mut("scenario")
                .and_then(|v| v.as_array_mut())
                .ok_or_else(|| UsageError(format!("override '{entry}' but no [[scenario]] tables")))?;
            for s in list.iter_mut() {
                s.as_table_mut()
                    .ok_or_else(|| UsageError("[[scenario]] entry is not a table".into()))?
                    .insert(field.to_string(), value.clone());
            }
        }
        other => return Err(UsageError(format!("unknown override section '{other}'"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use surrogate_debias::sim::{NoiseScale, Outcome};

    const MINIMAL: &str = r#"
[[scenario]]
outcome = "continuous"
missing_rate = 0.5
n = 500
"#;

    #[test]
    fn defaults_fill_in() {
        let c = Config::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.run.methods, Method::ALL.to_vec());
        let s = &c.scenario[0];
        assert_eq!((s.outcome, s.n, s.p, s.b_reps, s.n_replicates), (Outcome::Continuous, 500, 8, 200, 200));
        assert_eq!(s.noise, NoiseScale::Variance);
        assert_eq!(s.delta(), 0.5);
    }

    #[test]
    fn overrides_apply_to_every_scenario() {
        let text = format!("{MINIMAL}\n[[scenario]]\noutcome = \"binary\"\nmissing_rate = 0.9\nn = 1000\n");
        let c = Config::parse(&text, &["scenario.b_reps=7".into(), "scenario.noise=std_dev".into(), "run.methods=[\"baseline2\"]".into()])
            .unwrap();
        assert!(c.scenario.iter().all(|s| s.b_reps == 7 && s.noise == NoiseScale::StdDev));
        assert_eq!(c.run.methods, vec![Method::Baseline2]);
    }

    #[test]
    fn errors_name_the_problem() {
        let e = Config::parse("[[scenario]]\noutcome = \"continuous\"\nmissing_rate = 0.5\nn = 500\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.0.contains("bogus"), "{e}");
        let e = Config::parse("[[scenario]]\noutcome = \"continuous\"\nmissing_rate = 1.5\nn = 500\n", &[]).unwrap_err();
        assert!(e.0.contains("missing_rate"), "{e}");
        let e = Config::parse("[[scenario]\n", &[]).unwrap_err();
        assert!(e.0.contains("line 1"), "{e}");
        assert!(Config::parse(MINIMAL, &["b_reps=3".into()]).is_err());
        let e = Config::parse("[analyze]\nfamily = \"poisson\"\noutcome = \"y\"\ncovariates = []\n", &[]).unwrap_err();
        assert!(e.0.contains("family"), "{e}");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let text = format!("{MINIMAL}{MINIMAL}");
        assert!(Config::parse(&text, &[]).is_err());
        let named = format!("{MINIMAL}name = \"a\"\n{MINIMAL}name = \"b\"\n");
        assert_eq!(Config::parse(&named, &[]).unwrap().scenario.len(), 2);
    }
}
