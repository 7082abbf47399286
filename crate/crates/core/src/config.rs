//! Flat experiment configuration.
//!
//! One `section.key = value` pair per line; `#` starts a comment. Values
//! are JSON scalars or arrays (`0.001`, `true`, `[64, 64]`); bare words
//! are read as strings (`model.variant = se_unet`). Every key must exist
//! in the default configuration, and its value must have the same JSON
//! type as the default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::arch::{ModelSpec, PoolKind, Variant};
use crate::generator::{GeneratorSpec, GeneratorTrainConfig};
use crate::losses::LossConfig;
use crate::phantoms::PhantomConfig;
use crate::preprocess::PreprocessConfig;
use crate::trainer::{AblationConfig, Stage, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub variant: Variant,
    pub levels: usize,
    pub base_filters: usize,
    pub se_reduction: usize,
    pub dropout_rate: f32,
    pub max_slices: usize,
    pub model_path_pool: PoolKind,
    pub fc_hidden: usize,
    pub generator_channels: usize,
    pub generator_stages: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::desk(Variant::DgmNet, 16);
        let g = d.generator.expect("DGMNet has a generator");
        Self {
            variant: Variant::DgmNet,
            levels: d.levels,
            base_filters: d.base_filters,
            se_reduction: d.se_reduction,
            dropout_rate: d.dropout_rate,
            max_slices: d.max_slices,
            model_path_pool: d.model_path_pool,
            fc_hidden: d.fc_hidden,
            generator_channels: g.projection.0,
            generator_stages: g.upconv_stages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            validation_fraction: t.validation_fraction,
            test_fraction: t.test_fraction,
            early_stop_patience: t.early_stop_patience,
            seed: t.rng_seed,
            deterministic: t.deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: String,
    pub runs_dir: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), runs_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub generator: GeneratorTrainConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig { target_size: (64, 64), ..Default::default() },
            model: ModelSection::default(),
            generator: GeneratorTrainConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            paths: Paths::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn insert_path(root: &mut Map<String, Value>, key: &str, value: Value) {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            node.insert(p.to_string(), value);
            return;
        }
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("intermediate keys are objects");
    }
}

fn same_type(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::Null, _)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
    )
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Every `(key, value)` pair, sorted by key.
    pub fn entries(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("serializable"), &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            let head = k.split('.').next().unwrap_or("").to_string();
            if head != section {
                if !s.is_empty() {
                    s.push('\n');
                }
                s.push_str(&format!("# {head}\n"));
                section = head;
            }
            s.push_str(&format!("{k} = {}\n", render(&v)));
        }
        s
    }

    /// Apply `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let defaults: std::collections::BTreeMap<String, Value> = Self::default().entries().into_iter().collect();
        let mut values = defaults.clone();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(default) = defaults.get(k) else {
                return Err(ConfigError::UnknownKey(k.to_string()));
            };
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            let value = parse_value(v);
            if !same_type(default, &value) {
                return Err(ConfigError::Value { key: k.to_string(), message: format!("`{v}` has the wrong type") });
            }
            values.insert(k.to_string(), value);
        }
        let mut root = Map::new();
        for (k, v) in values {
            insert_path(&mut root, &k, v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(root)).map_err(|e| {
            let msg = e.to_string();
            let key = seen.iter().find(|k| msg.contains(k.rsplit('.').next().unwrap_or(k))).cloned();
            ConfigError::Value { key: key.unwrap_or_else(|| "?".into()), message: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text)
    }

    /// Override every seed (dataset, split, training, generator folds).
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.rng_seed = seed;
        self.train.seed = seed;
        self.generator.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.phantom.validate().map_err(|e| inv(e.to_string()))?;
        self.preprocess.validate().map_err(|e| inv(e.to_string()))?;
        for v in Variant::ALL {
            self.model_spec(v).validate().map_err(|e| inv(e.to_string()))?;
        }
        self.train_config(self.model.variant).validate().map_err(|e| inv(e.to_string()))?;
        if self.phantom.dims.2 > self.model.max_slices {
            return Err(inv(format!(
                "phantom depth {} exceeds model.max_slices {}",
                self.phantom.dims.2, self.model.max_slices
            )));
        }
        if self.generator.folds < 2 || self.generator.batch_size == 0 || !(self.generator.learning_rate > 0.0) {
            return Err(inv("generator needs folds >= 2, batch_size >= 1 and a positive learning_rate".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        let m = &self.model;
        let (w, h) = self.preprocess.target_size;
        ModelSpec {
            variant,
            levels: m.levels,
            base_filters: m.base_filters,
            se_reduction: m.se_reduction,
            dropout_rate: m.dropout_rate,
            input_size: (h, w),
            max_slices: m.max_slices,
            model_path_pool: m.model_path_pool,
            fc_hidden: m.fc_hidden,
            generator: (variant == Variant::DgmNet).then(|| self.generator_spec()),
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let (w, h) = self.preprocess.target_size;
        GeneratorSpec::for_output(self.model.max_slices, self.model.generator_channels, self.model.generator_stages, (h, w))
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage: Stage::Full,
            variant,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            validation_fraction: t.validation_fraction,
            test_fraction: t.test_fraction,
            rng_seed: t.seed,
            loss: self.loss,
            early_stop_patience: t.early_stop_patience,
            deterministic: t.deterministic,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            preprocess: self.preprocess.clone(),
            train: self.train_config(Variant::DgmNet),
            generator: self.generator,
            max_slices: self.model.max_slices,
            variants: Variant::ALL.to_vec(),
            high_contrast_row: true,
            model: Some(self.model_spec(Variant::DgmNet)),
        }
    }
}
