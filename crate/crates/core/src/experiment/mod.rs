//! Experiment configuration files and run orchestration.
//!
//! A config is a TOML document with a few top-level keys and the sections
//! `[data]`, `[model]`, `[train]`, `[schedule]` and `[analysis]`. Unknown keys
//! are rejected everywhere so that a typo cannot silently change a paired run.

mod run;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::default_ratios;
use crate::data::{gaussian_clusters, teacher_regression, ClusterSpec, RegressionSpec, TaskData};
use crate::error::{Error, Result};
use crate::model::{MlpConfig, Task};
use crate::sensitivity::VisualizationProtocol;
use crate::trainer::{
    IntraLoss, OptimizerConfig, OptimizerKind, Seeds, StrengthConfig, TrainConfig,
};

pub use run::{
    analyze, cmd_compare, cmd_schedule, cmd_sensitivity, cmd_sweep, evaluate_checkpoint, load_run_summary,
    run_experiment, sensitivity_batches,
    Artifacts, ManifestRun, ManifestResults, RunManifest, SensitivityOptions, MANIFEST_FILE,
};

const BUNDLED: &[(&str, &str)] = &[
    ("toy-classification", include_str!("../../configs/toy-classification.toml")),
    ("toy-regression", include_str!("../../configs/toy-regression.toml")),
    ("toy-convergence", include_str!("../../configs/toy-convergence.toml")),
];

/// Prefix selecting a config compiled into the binary, e.g. `bundled:toy-classification`.
pub const BUNDLED_PREFIX: &str = "bundled:";

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SyntheticClassification,
    SyntheticRegression,
}

impl TaskKind {
    pub fn task(self) -> Task {
        match self {
            TaskKind::SyntheticClassification => Task::Classification,
            TaskKind::SyntheticRegression => Task::Regression,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SyntheticClassification => "synthetic-classification",
            TaskKind::SyntheticRegression => "synthetic-regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Standard,
    Intra,
    SelfDistill,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::Intra => "intra",
            TrainMode::SelfDistill => "self-distill",
        }
    }
}

/// Generator settings; which optional fields are required depends on the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub valid_samples: usize,
    pub dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub dropout: f64,
}

fn default_passes() -> usize {
    2
}

fn one() -> f64 {
    1.0
}

fn sgd() -> OptimizerKind {
    OptimizerKind::Sgd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    #[serde(default = "default_passes")]
    pub passes: usize,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "sgd")]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub shared_masks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_loss: Option<IntraLoss>,
    /// Checkpoint of the teacher, required for `self-distill`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    #[serde(default = "one")]
    pub self_distill_task_weight: f64,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub alpha: f64,
    pub sentinel_p: f64,
    pub sentinel_q: f64,
    pub adaptive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
}

fn yes() -> bool {
    true
}
fn hundred() -> usize {
    100
}
fn thirty_two() -> usize {
    32
}
fn valid_split() -> Split {
    Split::Valid
}
fn trim() -> f64 {
    VisualizationProtocol::default().trim_top
}
fn sample() -> f64 {
    VisualizationProtocol::default().sample
}
fn fifty() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "hundred")]
    pub sensitivity_batches: usize,
    #[serde(default = "thirty_two")]
    pub sensitivity_batch_size: usize,
    #[serde(default = "valid_split")]
    pub sensitivity_split: Split,
    #[serde(default)]
    pub sensitivity_seed: u64,
    #[serde(default = "trim")]
    pub trim: f64,
    #[serde(default = "sample")]
    pub sample: f64,
    #[serde(default = "fifty")]
    pub histogram_bins: usize,
    #[serde(default = "default_ratios")]
    pub sweep_ratios: Vec<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        toml::from_str("").expect("all analysis fields have defaults")
    }
}

impl AnalysisSection {
    pub fn visualization(&self) -> VisualizationProtocol {
        VisualizationProtocol {
            trim_top: self.trim,
            sample: self.sample,
            seed: self.sensitivity_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

/// Short override keys accepted by `--set` in addition to dotted paths.
const ALIASES: &[(&str, &str)] = &[
    ("alpha", "schedule.alpha"),
    ("sentinel-p", "schedule.sentinel_p"),
    ("sentinel-q", "schedule.sentinel_q"),
    ("adaptive", "schedule.adaptive"),
    ("total-steps", "train.steps"),
    ("steps", "train.steps"),
    ("mode", "train.mode"),
    ("passes", "train.passes"),
    ("dropout", "model.dropout"),
    ("teacher", "train.teacher"),
];

fn resolve_key(key: &str) -> String {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, p)| (*p).to_string())
        .unwrap_or_else(|| key.replace('-', "_"))
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string so that `mode=intra` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `key=value` override to a raw config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = resolve_key(key.trim());
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return Err(Error::Config(format!("empty override key in `{assignment}`")));
    };
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{path}` is not a section")))?;
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a file, or a bundled config when `source` starts with `bundled:`.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let text = match source.strip_prefix(BUNDLED_PREFIX) {
            Some(name) => bundled(name)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no bundled config `{name}` (have: {})",
                        bundled_names().join(", ")
                    ))
                })?
                .to_string(),
            None => fs::read_to_string(source).map_err(|e| Error::io(Path::new(source), e))?,
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets all three seeds to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seeds = Seeds::all(seed);
        self
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskKind::SyntheticClassification => self.data.classes.unwrap_or(0),
            TaskKind::SyntheticRegression => 1,
        }
    }

    pub fn model_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.data.dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: self.output_dim(),
            task: self.task.task(),
            dropout: self.model.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            passes: self.train.passes,
            strength: StrengthConfig {
                alpha: self.schedule.alpha,
                p: self.schedule.sentinel_p,
                q: self.schedule.sentinel_q,
                adaptive: self.schedule.adaptive,
            },
            intra_loss: self.train.intra_loss,
            optimizer: OptimizerConfig {
                kind: self.train.optimizer,
                learning_rate: self.train.learning_rate,
                weight_decay: self.train.weight_decay,
            },
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seeds: self.train.seeds,
            checkpoint_every: self.train.checkpoint_every,
            shared_masks: self.train.shared_masks,
            self_distill_task_weight: self.train.self_distill_task_weight,
            keep_snapshots: false,
        }
    }

    pub fn generate_data(&self) -> Result<TaskData> {
        let d = &self.data;
        let need = |field: &str| Error::Config(format!("data.{field} is required for {}", self.task.name()));
        match self.task {
            TaskKind::SyntheticClassification => gaussian_clusters(&ClusterSpec {
                train_samples: d.train_samples,
                valid_samples: d.valid_samples,
                dim: d.dim,
                classes: d.classes.ok_or_else(|| need("classes"))?,
                margin: d.margin.ok_or_else(|| need("margin"))?,
                label_noise: d.label_noise.unwrap_or(0.0),
                clusters_per_class: d.clusters_per_class.unwrap_or(1),
                seed: d.seed,
            }),
            TaskKind::SyntheticRegression => teacher_regression(&RegressionSpec {
                train_samples: d.train_samples,
                valid_samples: d.valid_samples,
                dim: d.dim,
                teacher_hidden: d.teacher_hidden.ok_or_else(|| need("teacher_hidden"))?,
                target_noise: d.target_noise.ok_or_else(|| need("target_noise"))?,
                seed: d.seed,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let wrong = |fields: &[(&str, bool)]| -> Result<()> {
            match fields.iter().find(|(_, present)| *present) {
                Some((f, _)) => Err(Error::Config(format!(
                    "data.{f} does not apply to {}",
                    self.task.name()
                ))),
                None => Ok(()),
            }
        };
        match self.task {
            TaskKind::SyntheticClassification => wrong(&[
                ("teacher_hidden", d.teacher_hidden.is_some()),
                ("target_noise", d.target_noise.is_some()),
            ])?,
            TaskKind::SyntheticRegression => wrong(&[
                ("classes", d.classes.is_some()),
                ("margin", d.margin.is_some()),
                ("label_noise", d.label_noise.is_some()),
                ("clusters_per_class", d.clusters_per_class.is_some()),
            ])?,
        }
        self.model_config().validate()?;
        self.train_config().strength.resolve(self.train.steps)?;
        if self.train.mode == TrainMode::Intra && self.train.passes < 2 {
            return Err(Error::Config("train.passes must be >= 2 in intra mode".into()));
        }
        if self.analysis.enabled {
            self.analysis.visualization().validate()?;
            crate::analysis::validate_ratios(&self.analysis.sweep_ratios)?;
            if self.analysis.sensitivity_batches == 0 || self.analysis.histogram_bins == 0 {
                return Err(Error::Config(
                    "analysis needs sensitivity_batches and histogram_bins >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
