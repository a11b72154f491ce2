//! Experiment drivers: configuration, grid cells, tables and output files.
//!
//! Every runner is a pure function of its [`ExperimentConfig`]; files are
//! written afterwards by [`ExperimentOutput::write`]. Cells run in parallel
//! and are collected in grid order, so the thread count never changes output.

mod experiments;
mod selftest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::construct::{EquivalenceClassSpec, GaussianPriorSpec, RELU_UNIT_VARIANCE_SCALE};
use crate::data::{Activation, TargetGenerator};
use crate::error::{Error, Result};

pub use experiments::{
    run_heatmap, run_optimality_gap, run_pdf_dump, run_prior_comparison, run_variance_scaling, Cell,
};
pub use selftest::run_selftest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSourceKind {
    #[default]
    Gaussian,
    EquivalenceClass,
}

fn default_d_list() -> Vec<usize> {
    vec![10, 50, 100]
}
fn default_ratios() -> Vec<f64> {
    vec![0.5, 0.8, 1.0, 1.2, 1.5, 2.0]
}
fn default_p_over_n() -> Vec<f64> {
    vec![1.5, 2.0, 2.4]
}
fn default_j_count() -> usize {
    2000
}
fn default_noise_var_list() -> Vec<f64> {
    vec![0.01]
}
fn default_threshold() -> f64 {
    crate::mixture::DEFAULT_THRESHOLD
}
fn default_n_test_points() -> usize {
    10
}
fn default_n_y_realizations() -> usize {
    10
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_grid_points() -> usize {
    2001
}
fn default_hist_bins() -> usize {
    50
}
fn default_prior_variance_scale() -> f64 {
    RELU_UNIT_VARIANCE_SCALE
}
fn default_activation() -> Activation {
    Activation::Relu
}

/// Experiment grid and run settings. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_d_list")]
    pub d_list: Vec<usize>,
    #[serde(default = "default_ratios")]
    pub n_over_d: Vec<f64>,
    #[serde(default = "default_ratios")]
    pub p_over_d: Vec<f64>,
    /// Width ratios for the variance-scaling study (`p = round(ratio * n)`).
    #[serde(default = "default_p_over_n")]
    pub p_over_n: Vec<f64>,
    #[serde(default = "default_j_count")]
    pub j_count: usize,
    #[serde(default = "default_noise_var_list")]
    pub noise_var_list: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_n_test_points")]
    pub n_test_points: usize,
    #[serde(default = "default_n_y_realizations")]
    pub n_y_realizations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub candidate_source: CandidateSourceKind,
    #[serde(default)]
    pub class_spec: Option<EquivalenceClassSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub target_generator: TargetGenerator,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Gaussian candidates have entries `N(0, prior_variance_scale / d_in)`.
    #[serde(default = "default_prior_variance_scale")]
    pub prior_variance_scale: f64,
    /// Points on the density grid of each pdf dump.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Fields present in `json` replace those of `base`.
    pub fn from_json_over(base: &Self, json: &str) -> Result<Self> {
        let mut merged = serde_json::to_value(base)?;
        let patch: serde_json::Value = serde_json::from_str(json)?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(Error::invalid("config file must hold a JSON object"));
        };
        let obj = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in patch {
            obj.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults tailored to one experiment: the equivalence-class studies use
    /// `n/d = 0.7` and `d` in {50, 100, 150}.
    pub fn defaults_for(experiment: &str) -> Self {
        let mut c = Self::default();
        match experiment {
            "variance-scaling" | "variance_scaling" => {
                c.candidate_source = CandidateSourceKind::EquivalenceClass;
                c.d_list = vec![50, 100, 150];
                c.n_over_d = vec![0.7];
            }
            "prior-comparison" | "prior_comparison" => {
                c.candidate_source = CandidateSourceKind::EquivalenceClass;
                c.d_list = vec![100];
                c.n_over_d = vec![0.7];
                c.p_over_d = vec![1.7];
            }
            _ => {}
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.d_list.is_empty()
            || self.n_over_d.is_empty()
            || self.p_over_d.is_empty()
            || self.p_over_n.is_empty()
            || self.noise_var_list.is_empty()
        {
            return fail("config lists must be nonempty");
        }
        if self.d_list.contains(&0) {
            return fail("d_list entries must be positive");
        }
        let ratios = self.n_over_d.iter().chain(&self.p_over_d).chain(&self.p_over_n);
        if ratios.clone().any(|r| !(*r > 0.0 && r.is_finite())) {
            return fail("ratios must be positive and finite");
        }
        if self.noise_var_list.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return fail("noise variances must be positive and finite");
        }
        if self.j_count == 0 {
            return fail("j_count must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        if self.n_test_points == 0 || self.n_y_realizations == 0 {
            return fail("n_test_points and n_y_realizations must be at least 1");
        }
        if self.grid_points < 3 || self.hist_bins == 0 {
            return fail("grid_points must be at least 3 and hist_bins at least 1");
        }
        GaussianPriorSpec::new(self.prior_variance_scale)?;
        if let Some(spec) = &self.class_spec {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn prior(&self) -> GaussianPriorSpec {
        GaussianPriorSpec {
            variance_scale: self.prior_variance_scale,
        }
    }

    pub fn class_spec_or_default(&self) -> EquivalenceClassSpec {
        self.class_spec.unwrap_or_default()
    }

    /// SHA-256 of the canonical JSON form. The output directory is excluded so
    /// that the same run written to two places produces identical files.
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Text(s) => f.write_str(s),
            Value::Empty => Ok(()),
        }
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Long-format table with a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&Value> {
        self.column(name).map(|c| &self.rows[row][c])
    }

    pub fn f64(&self, row: usize, name: &str) -> Option<f64> {
        self.get(row, name).and_then(Value::as_f64)
    }

    /// CSV text preceded by a `# config_sha256=...` comment line.
    pub fn to_csv(&self, config_sha256: &str) -> Result<Vec<u8>> {
        let mut buf = format!("# config_sha256={config_sha256}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.columns)?;
            for row in &self.rows {
                w.write_record(row.iter().map(Value::to_string))?;
            }
            w.flush()?;
        }
        Ok(buf)
    }
}

/// Result of one experiment run, before anything touches the filesystem.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub experiment: &'static str,
    pub tables: Vec<Table>,
    /// One message per failed cell; the matching rows carry the error too.
    pub failures: Vec<String>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    experiment: &'a str,
    config_sha256: String,
    config: &'a ExperimentConfig,
    crate_version: &'a str,
    tables: Vec<SidecarTable<'a>>,
    failures: &'a [String],
}

#[derive(Serialize)]
struct SidecarTable<'a> {
    file: String,
    columns: &'a [String],
    rows: usize,
}

impl ExperimentOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `<table>.csv` for every table plus `<experiment>.json` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let hash = cfg.sha256();
        let mut written = Vec::with_capacity(self.tables.len() + 1);
        for t in &self.tables {
            let path = dir.join(format!("{}.csv", t.name));
            fs::write(&path, t.to_csv(&hash)?)?;
            written.push(path);
        }
        let sidecar = Sidecar {
            experiment: self.experiment,
            config_sha256: hash,
            config: cfg,
            crate_version: env!("CARGO_PKG_VERSION"),
            tables: self
                .tables
                .iter()
                .map(|t| SidecarTable {
                    file: format!("{}.csv", t.name),
                    columns: &t.columns,
                    rows: t.rows.len(),
                })
                .collect(),
            failures: &self.failures,
        };
        let path = dir.join(format!("{}.json", self.experiment));
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(path);
        Ok(written)
    }
}

/// Runs `f` on a dedicated rayon pool with `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::invalid("thread count must be at least 1"));
        }
        b = b.num_threads(t);
    }
    let pool = b
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.j_count, 2000);
        assert_eq!(c.d_list, vec![10, 50, 100]);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"d_list": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n_over_d": [0.0]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"j_count": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn file_fields_override_base() {
        let base = ExperimentConfig::defaults_for("variance-scaling");
        let c = ExperimentConfig::from_json_over(&base, r#"{"d_list": [20], "seed": 5}"#).unwrap();
        assert_eq!(c.d_list, vec![20]);
        assert_eq!(c.seed, 5);
        assert_eq!(c.candidate_source, CandidateSourceKind::EquivalenceClass);
        assert!(ExperimentConfig::from_json_over(&base, "[1]").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.sha256(), b.sha256());
        b.seed = 1;
        assert_ne!(a.sha256(), b.sha256());
    }

    #[test]
    fn csv_has_hash_header() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![1usize.into(), 0.5.into()]);
        let s = String::from_utf8(t.to_csv("abc").unwrap()).unwrap();
        assert_eq!(s, "# config_sha256=abc\na,b\n1,0.5\n");
        assert_eq!(Value::Float(1e-20).to_string(), "1e-20");
    }
}
