//! Experiment configuration: TOML files layered over named presets, with
//! command-line overrides on top.
//!
//! Resolution order, later entries winning field by field:
//! preset (when `recipe` names one) < config file < `--set` style overrides.
//! Tables merge recursively; any other value replaces what was there.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use biva::training::TrainObjective;
use biva::{DatasetName, DatasetSpec, ModelConfig, ObjectiveConfig, OptimizerConfig};

use crate::error::{CliError, Result};

pub const PRESETS: [(&str, &str); 5] = [
    ("binary6", include_str!("../presets/binary6.toml")),
    ("natural15", include_str!("../presets/natural15.toml")),
    ("natural20", include_str!("../presets/natural20.toml")),
    ("density2d", include_str!("../presets/density2d.toml")),
    ("ssl100", include_str!("../presets/ssl100.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::config("recipe", format!("unknown recipe `{name}`; known: {}", known.join(", ")))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub patience: usize,
    pub max_epochs: usize,
}

fn default_batch() -> usize {
    48
}

fn default_eval_batch() -> usize {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// No default: every run states its length.
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub task: TrainObjective,
    /// Free-bits-off continuation after the main run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
    /// Labeled examples kept per class for semi-supervised runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_per_class: Option<usize>,
    /// Score the test split once training ends.
    #[serde(default = "default_true")]
    pub evaluate_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Posterior draws behind the 2D grid KL.
    pub grid_kl_samples: usize,
    pub sample_batch: usize,
    /// Monte Carlo draws per example for anomaly scores.
    pub anomaly_mc: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { grid_kl_samples: 1_000_000, sample_batch: 4096, anomaly_mc: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
pub fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Sets a dotted path, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{path}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// One `key=value` override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: Value) -> Self {
        Self { key: key.into(), value }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (k, v) = text.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{text}` is not key=value")))?;
        Ok(Self::new(k.trim(), parse_value(v.trim())))
    }
}

fn parse_table(text: &str, origin: &Path) -> Result<Table> {
    toml::from_str(text).map_err(|e| CliError::Parse { path: origin.to_path_buf(), message: e.to_string() })
}

/// Builds the merged table for a config file and/or recipe plus overrides.
pub fn layered_table(file: Option<&Path>, recipe: Option<&str>, overrides: &[Override]) -> Result<Table> {
    let user = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_table(&text, p)?
        }
        None => Table::new(),
    };
    let recipe = recipe.map(str::to_string).or_else(|| user.get("recipe").and_then(Value::as_str).map(str::to_string));
    let mut table = match &recipe {
        Some(r) => {
            let mut t = parse_table(preset_text(r)?, Path::new(&format!("<preset {r}>")))?;
            t.insert("recipe".into(), Value::String(r.clone()));
            t
        }
        None => Table::new(),
    };
    merge(&mut table, user);
    if let Some(r) = recipe {
        table.insert("recipe".into(), Value::String(r));
    }
    for o in overrides {
        set_path(&mut table, &o.key, o.value.clone())?;
    }
    Ok(table)
}

/// Field name from a serde message like "missing field `epochs`".
fn field_in(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(message[start..end].to_string())
}

impl ExperimentConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            CliError::config(field_in(&msg).unwrap_or_else(|| "config".into()), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(file: Option<&Path>, recipe: Option<&str>, overrides: &[Override]) -> Result<Self> {
        if file.is_none() && recipe.is_none() {
            return Err(CliError::Usage("give a config file or --recipe".into()));
        }
        Self::from_table(layered_table(file, recipe, overrides)?)
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: biva::Error| match e {
            biva::Error::Config { field, reason } => {
                let field = if field.starts_with(section) { field } else { format!("{section}.{field}") };
                CliError::Config { field, reason }
            }
            other => CliError::Core(other),
        };
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.objective.validate(self.model.num_layers).map_err(|e| prefixed("objective", e))?;
        self.optimizer.validate().map_err(|e| prefixed("optimizer", e))?;
        let t = &self.training;
        if t.epochs == 0 {
            return Err(CliError::config("training.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(CliError::config("training.batch_size", "must be at least 1"));
        }
        if t.eval_batch == 0 {
            return Err(CliError::config("training.eval_batch", "must be at least 1"));
        }
        if t.steps_per_epoch == Some(0) {
            return Err(CliError::config("training.steps_per_epoch", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "list at least one seed"));
        }
        let shape = self.dataset.name.example_shape();
        if shape != self.model.input_shape {
            return Err(CliError::config(
                "model.input_shape",
                format!("{:?} does not match {} examples of shape {shape:?}", self.model.input_shape, self.dataset.name),
            ));
        }
        match &t.task {
            TrainObjective::Energy2d { beta_start, .. } => {
                if self.dataset.name != DatasetName::Density2d {
                    return Err(CliError::config("training.task", "the energy objective trains on the density2d dataset"));
                }
                if !(0.1..=1.0).contains(beta_start) {
                    return Err(CliError::config("training.task.beta_start", "must lie in [0.1, 1]"));
                }
            }
            TrainObjective::SemiSupervised { labeled_batch } => {
                if self.model.num_classes.is_none() {
                    return Err(CliError::config("model.num_classes", "semi-supervised training needs a classifier"));
                }
                if t.labeled_per_class.is_none_or(|n| n == 0) {
                    return Err(CliError::config("training.labeled_per_class", "semi-supervised training needs labels per class"));
                }
                if *labeled_batch == 0 {
                    return Err(CliError::config("training.task.labeled_batch", "must be at least 1"));
                }
            }
            TrainObjective::Elbo => {}
        }
        if let Some(f) = &t.finetune {
            if f.patience == 0 {
                return Err(CliError::config("training.finetune.patience", "must be at least 1"));
            }
        }
        if self.evaluation.sample_batch == 0 || self.evaluation.anomaly_mc == 0 {
            return Err(CliError::config("evaluation", "batch and draw counts must be at least 1"));
        }
        Ok(())
    }

    /// Fully resolved TOML; loading it back yields an equal config.
    pub fn echo(&self) -> Result<String> {
        let mut plain = self.clone();
        let origin = plain.recipe.take();
        let body = toml::to_string(&plain).map_err(|e| CliError::Usage(format!("cannot render config: {e}")))?;
        Ok(match origin {
            Some(r) => format!("# resolved from recipe `{r}`\n{body}"),
            None => body,
        })
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone()).map_err(|e| CliError::config("experiment", format!("checkpoint echo unreadable: {e}")))
    }

    /// Output directory of one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}
