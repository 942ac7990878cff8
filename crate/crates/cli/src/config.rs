//! Run configuration: a JSON document, `--set` overrides and the output
//! directory override.

use std::path::{Path, PathBuf};

use equifourier::activation::Activation;
use equifourier::bench::BenchConfig;
use equifourier::model::train::TrainConfig;
use equifourier::model::{FixedGrid, ModelConfig};
use equifourier::reptypes::FieldType;
use equifourier::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "EQUIFOURIER_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FourierFixed,
    Adaptive,
    Norm,
    Gated,
}

impl ModelKind {
    pub fn uses_samples(self) -> bool {
        matches!(self, ModelKind::FourierFixed | ModelKind::Adaptive)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FourierFixed => "fourier_fixed",
            ModelKind::Adaptive => "adaptive",
            ModelKind::Norm => "norm",
            ModelKind::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_class: 25,
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivarianceConfig {
    /// Random inputs per layer and `N`.
    pub inputs: usize,
    pub channels: usize,
    /// Spatial points per adaptive-layer input.
    pub points: usize,
    /// Test clouds per model-level measurement.
    pub clouds: usize,
}

impl Default for EquivarianceConfig {
    fn default() -> Self {
        EquivarianceConfig {
            inputs: 50,
            channels: 1,
            points: 2,
            clouds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Sample counts for `grid`, `diag` and `equivariance`.
    pub n_sweep: Vec<usize>,
    /// Sample counts for `train`.
    pub train_sweep: Vec<usize>,
    pub field_type: FieldType,
    pub grid: FixedGrid,
    pub repulsion_steps: usize,
    pub repulsion_step_size: f64,
    pub activation: Activation,
    pub models: Vec<ModelKind>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub equivariance: EquivarianceConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2],
            n_sweep: vec![1, 2, 4, 8, 16, 32, 64],
            train_sweep: vec![2, 64],
            field_type: FieldType::quotient(3).expect("valid"),
            grid: FixedGrid::Repulsion,
            repulsion_steps: 500,
            repulsion_step_size: 0.01,
            activation: Activation::Elu,
            models: vec![
                ModelKind::FourierFixed,
                ModelKind::Adaptive,
                ModelKind::Norm,
                ModelKind::Gated,
            ],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            equivariance: EquivarianceConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.n_sweep.contains(&0) || self.train_sweep.contains(&0) {
            return bad("sample counts must be positive");
        }
        if !(self.repulsion_step_size > 0.0) {
            return bad("repulsion_step_size must be positive");
        }
        if self.data.n_per_class == 0 {
            return bad("data.n_per_class must be at least 1");
        }
        let e = &self.equivariance;
        if e.inputs == 0 || e.channels == 0 || e.points == 0 {
            return bad("equivariance sizes must be positive");
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Parses `key=value`; `value` is read as JSON when possible and as a
/// string otherwise.
fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = doc;
    for (i, k) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {:?}: parent is not an object", path.join("."))))?;
        if i + 1 == path.len() {
            obj.insert(k.clone(), value);
            return Ok(());
        }
        cur = obj.entry(k.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path is nonempty")
}

/// Builds the configuration from an optional JSON document, overrides and
/// an optional output directory from the environment.
pub fn build(document: Option<&str>, overrides: &[String], env_output_dir: Option<&str>) -> Result<RunConfig> {
    let mut doc = match document {
        Some(text) => serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?,
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("config document must be a JSON object".into()));
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut doc, &path, value)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(dir) = env_output_dir.filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let env = std::env::var(OUTPUT_DIR_ENV).ok();
    build(text.as_deref(), overrides, env.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use equifourier::model::Nonlinearity;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(build(None, &[], None).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = build(Some(r#"{"seed": 3}"#), &[], None).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        assert!(build(None, &["model.depth=2".into()], None).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = build(
            Some(r#"{"seeds": [4]}"#),
            &[
                "train.epochs=3".into(),
                "output_dir=runs/a".into(),
                r#"model.nonlinearity={"kind":"norm"}"#.into(),
                "n_sweep=[2,8]".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
        assert_eq!(cfg.model.nonlinearity, Nonlinearity::Norm);
        assert_eq!(cfg.n_sweep, vec![2, 8]);
    }

    #[test]
    fn environment_replaces_output_dir() {
        let cfg = build(None, &["output_dir=a".into()], Some("b")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("b"));
    }

    #[test]
    fn malformed_overrides_fail() {
        assert!(build(None, &["epochs".into()], None).is_err());
        assert!(build(None, &["train..epochs=1".into()], None).is_err());
        assert!(build(None, &["seeds.x=1".into()], None).is_err());
        assert!(build(None, &["seeds=[]".into()], None).is_err());
        assert!(build(Some("[1]"), &[], None).is_err());
    }
}
