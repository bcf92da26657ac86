//! Experiment configuration: a TOML document, schema-checked, with
//! command-line overrides layered on top.
//!
//! Precedence is flags > file > defaults. Every error names the offending
//! key as a dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, GaussianWorldSpec, TaskSampler};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::trainer::{AdamWConfig, ClockMode, DistillSetup, StudentSpec, TrainConfig};
use crate::verify::bench::BenchConfig;

pub const MAX_SYNTHETIC: usize = 2;

/// The learning task: a subset of world classes, relabelled `0..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub subset: Vec<usize>,
    pub per_class: usize,
    pub test_per_class: usize,
    pub foundation_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            subset: (0..10).collect(),
            per_class: 100,
            test_per_class: 100,
            foundation_per_class: 150,
        }
    }
}

/// MLP classifier widths plus the epoch budgets of its pretraining and
/// probing stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
}

impl ModelConfig {
    fn with_widths(hidden: Vec<usize>, feat_dim: usize) -> Self {
        Self {
            hidden,
            feat_dim,
            pretrain_epochs: 250,
            probe_epochs: 250,
        }
    }

    pub fn classifier(&self, in_dim: usize, num_classes: usize) -> Result<StudentSpec> {
        StudentSpec::mlp(in_dim, &self.hidden, self.feat_dim, num_classes)
    }

    fn validate(&self, table: &str) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(config_err(format!("{table}.feat_dim"), "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(config_err(format!("{table}.hidden"), "widths must be >= 1"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_widths(vec![96], 64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Epochs of `scratch` and `distill`.
    pub epochs: usize,
    pub batch_size: usize,
    pub n_synthetic: usize,
    pub out: PathBuf,
    pub use_teacher_head: bool,
    pub teacher_from_dump: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_path: Option<PathBuf>,
    pub clock: ClockMode,

    pub w_align: f64,
    pub w_uniform: f64,
    pub alpha: f64,
    pub t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kd_temperature: f64,
    pub nce_temperature: f64,
    pub uniformity_log_form: bool,

    pub world: GaussianWorldSpec,
    pub task: TaskConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub distill: DistillSetup,
    pub optimizer: AdamWConfig,
    pub augment: AugmentPolicy,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 9,
            epochs: 250,
            batch_size: 128,
            n_synthetic: 0,
            out: PathBuf::from("out"),
            use_teacher_head: true,
            teacher_from_dump: false,
            dump_path: None,
            clock: ClockMode::default(),
            w_align: w.w_align,
            w_uniform: w.w_uniform,
            alpha: w.alpha,
            t: w.t,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            kd_temperature: w.kd_temperature,
            nce_temperature: w.nce_temperature,
            uniformity_log_form: w.uniformity_log_form,
            world: GaussianWorldSpec::default(),
            task: TaskConfig::default(),
            teacher: ModelConfig::default(),
            student: ModelConfig::with_widths(vec![32], 16),
            distill: DistillSetup::default(),
            optimizer: AdamWConfig::default(),
            augment: AugmentPolicy::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn prefixed(table: &str, e: Error) -> Error {
    match e {
        Error::Config { key, message } if !key.starts_with(table) => Error::Config {
            key: format!("{table}.{key}"),
            message,
        },
        Error::Config { .. } => e,
        other => config_err(table, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_align: self.w_align,
            w_uniform: self.w_uniform,
            alpha: self.alpha,
            t: self.t,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            kd_temperature: self.kd_temperature,
            nce_temperature: self.nce_temperature,
            uniformity_log_form: self.uniformity_log_form,
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
            augment: self.augment,
            clock: self.clock,
        }
    }

    pub fn num_task_classes(&self) -> usize {
        self.task.subset.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.train_config(self.epochs).validate()?;
        self.world.validate()?;
        if self.n_synthetic > MAX_SYNTHETIC {
            return Err(config_err(
                "n_synthetic",
                format!("must be 0, 1 or 2, got {}", self.n_synthetic),
            ));
        }
        TaskSampler::new(&self.world, &self.task.subset).map_err(|e| config_err("task.subset", e.to_string()))?;
        for (key, v) in [
            ("task.per_class", self.task.per_class),
            ("task.test_per_class", self.task.test_per_class),
            ("task.foundation_per_class", self.task.foundation_per_class),
            ("distill.projection_dim", self.distill.projection_dim),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be >= 1"));
            }
        }
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        if self.teacher_from_dump && self.dump_path.is_none() {
            return Err(config_err("dump_path", "required when teacher_from_dump is set"));
        }
        self.bench.validate().map_err(|e| prefixed("bench", e))
    }

    /// Canonical TOML of the fully resolved config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// One `key.path=value` assignment. The value is read as a TOML literal,
/// falling back to a bare string (`out=runs/a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: &str, value: toml::Value) -> Self {
        Self {
            key: key.to_string(),
            value,
        }
    }

    pub fn parse(assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(assignment, "override must look like key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(config_err(assignment, "empty key segment"));
        }
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        Ok(Self::new(key, value))
    }

    fn apply(&self, root: &mut toml::Table) -> Result<()> {
        let mut segments: Vec<&str> = self.key.split('.').collect();
        let last = segments.pop().expect("non-empty key");
        let mut table = root;
        for (i, seg) in segments.iter().enumerate() {
            let entry = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| config_err(segments[..=i].join("."), "not a table"))?;
        }
        table.insert(last.to_string(), self.value.clone());
        Ok(())
    }
}

/// Parses a TOML document, applies `overrides` in order, fills defaults
/// and validates.
pub fn resolve(text: &str, overrides: &[Override]) -> Result<ExperimentConfig> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let at = e
            .span()
            .map(|s| format!(" (line {})", text[..s.start].lines().count().max(1)))
            .unwrap_or_default();
        config_err("<document>", format!("{}{at}", e.message().trim()))
    })?;
    for o in overrides {
        o.apply(&mut root)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(root)).map_err(|e| {
        let key = e.path().to_string();
        config_err(key, e.inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    resolve(text, &[])
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e.to_string()))?;
    parse_config_str(&text)
}
