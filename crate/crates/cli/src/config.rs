//! Run configuration: one JSON document, flags layered on top.

use std::path::PathBuf;

use nnme::eval::{EvalRegion, PosteriorOption};
use nnme::kriging::KrigingConfig;
use nnme::model::Dataset;
use nnme::trainers::{ErrorSpec, Method, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::{config_error, CliError};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<String>,
    /// Dataset CSV (w1..wd, y, optional su2/se2).
    pub data: Option<PathBuf>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub sigma0: Option<f64>,
    pub sigma: Option<f64>,
    /// Training settings; any `TrainConfig` key. `measurement_error` defaults
    /// to the scenario's or `sigma0`, `seed` to one derived from the run seed.
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub kriging: Option<KrigingConfig>,
    /// Prediction and scoring region for dataset inputs.
    pub region: Option<EvalRegion>,
    /// Truth on the region grid (`x1..xd, f`), e.g. a `grid.csv` from `simulate`.
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub posterior: PosteriorOption,
    /// Draws per row for posterior means.
    pub k_pred: usize,
    /// Bootstrap refits for a pointwise band; 0 skips it.
    pub bootstrap: usize,
    pub level: f64,
    pub prediction_folds: usize,
    /// Repetitions of k-fold prediction error; 0 skips it.
    pub prediction_reps: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { posterior: PosteriorOption::Flat, k_pred: 1000, bootstrap: 0, level: 0.95, prediction_folds: 5, prediction_reps: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    /// Candidate settings, each layered over `train`.
    pub grid: Vec<Map<String, Value>>,
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { grid: vec![Map::new()], folds: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<String>,
    pub methods: Vec<String>,
    pub reps: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { scenarios: Vec::new(), methods: Vec::new(), reps: 1 }
    }
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| config_error(format!("config: {e}")))
}

pub fn parse_method(name: &str) -> Result<Method, CliError> {
    name.trim().parse::<Method>().map_err(|e| config_error(format!("{e}")))
}

/// Comma-separated list from a flag, else the config list.
pub fn list(flag: Option<&str>, config: &[String]) -> Vec<String> {
    match flag {
        Some(s) => s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
        None => config.to_vec(),
    }
}

/// The measurement-error law implied by the inputs when the config names none.
pub fn default_error(sigma0: Option<f64>, data: &Dataset) -> Option<ErrorSpec> {
    match sigma0 {
        Some(sigma0) => Some(ErrorSpec::Gaussian { sigma0 }),
        None if data.su2.is_some() => Some(ErrorSpec::PerRow),
        None => None,
    }
}

/// Builds a validated `TrainConfig` from `base` with `overrides` on top.
pub fn train_config(
    base: &Map<String, Value>,
    overrides: Option<&Map<String, Value>>,
    error: Option<ErrorSpec>,
    data: &Dataset,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let mut m = base.clone();
    if let Some(o) = overrides {
        m.extend(o.clone());
    }
    if !m.contains_key("measurement_error") {
        let spec = error.ok_or_else(|| config_error("measurement error unknown: give sigma0, an su2 column or train.measurement_error"))?;
        m.insert("measurement_error".into(), serde_json::to_value(spec).expect("serializable"));
    }
    if !m.contains_key("heteroscedastic") && data.se2.is_some() {
        m.insert("heteroscedastic".into(), Value::Bool(true));
    }
    m.entry("seed").or_insert(Value::from(seed));
    let cfg: TrainConfig = serde_json::from_value(Value::Object(m)).map_err(|e| config_error(format!("train: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
