use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Split, TrainMode};
use crate::analysis::{compare, prune_sweep, write_sweep, PruneSweepResult, RunSummary, STUDIED_MAX_RATIO};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, Mlp, ParameterVector};
use crate::schedule::AlphaSchedule;
use crate::sensitivity::{
    balance_std, histogram, per_parameter_scores, read_report_scores, summary_text,
    write_histogram, write_report, SensitivityReport, VisualizationProtocol,
};
use crate::trainer::{
    evaluate, train_intra_distill, train_self_distill, train_standard, TrainMetrics, TrainedModel,
};
use crate::util::fmt_f64;

pub const MANIFEST_FILE: &str = "manifest.toml";
const STATUS_COMPLETE: &str = "complete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRun {
    pub name: String,
    pub mode: String,
    pub task: String,
    pub seed: u64,
    pub status: String,
    pub version: String,
    /// The only nondeterministic field of a run.
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestResults {
    pub best_step: usize,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub metric_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_at_half: Option<f64>,
}

/// Paths relative to the run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    pub checkpoint: String,
    pub final_checkpoint: String,
    pub metrics: String,
    pub validation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity_summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<String>,
}

impl Artifacts {
    pub fn paths(&self) -> Vec<&str> {
        let mut v = vec![
            self.checkpoint.as_str(),
            self.final_checkpoint.as_str(),
            self.metrics.as_str(),
            self.validation.as_str(),
        ];
        for o in [&self.sensitivity, &self.sensitivity_summary, &self.histogram, &self.sweep] {
            if let Some(p) = o {
                v.push(p);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run: ManifestRun,
    pub results: ManifestResults,
    pub artifacts: Artifacts,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.message().to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn is_complete(&self) -> bool {
        self.run.status == STATUS_COMPLETE
    }
}

fn write_metrics(path: &Path, metrics: &TrainMetrics) -> Result<()> {
    let mut out = String::from("step,task_loss_mean,intra_loss,alpha_prime,wall_ms\n");
    for (r, ms) in metrics.steps.iter().zip(&metrics.wall_ms) {
        let _ = writeln!(
            out,
            "{},{},{},{},{ms}",
            r.step,
            fmt_f64(r.task_loss_mean),
            fmt_f64(r.intra_loss),
            fmt_f64(r.alpha_prime)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_validation(path: &Path, metrics: &TrainMetrics) -> Result<()> {
    let mut out = String::from("step,valid_loss,valid_metric\n");
    for c in &metrics.checkpoints {
        let _ = writeln!(
            out,
            "{},{},{}",
            c.step,
            fmt_f64(c.valid.loss),
            fmt_f64(c.valid.metric)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(config: &ExperimentConfig) -> Result<(TrainedModel, crate::data::TaskData)> {
    let data = config.generate_data()?;
    let tc = config.train_config();
    let trained = match config.train.mode {
        TrainMode::Standard => train_standard(&tc, &data)?,
        TrainMode::Intra => train_intra_distill(&tc, &data)?,
        TrainMode::SelfDistill => {
            let path = config.train.teacher.as_deref().ok_or_else(|| {
                Error::Config("train.teacher is required in self-distill mode".into())
            })?;
            let (teacher_cfg, teacher) = read_checkpoint(Path::new(path))?;
            let student = config.model_config();
            if teacher_cfg.layer_dims() != student.layer_dims() || teacher_cfg.task != student.task
            {
                return Err(Error::Config(format!(
                    "teacher {path} has layers {:?}, student needs {:?}",
                    teacher_cfg.layer_dims(),
                    student.layer_dims()
                )));
            }
            train_self_distill(&tc, &data, &teacher)?
        }
    };
    Ok((trained, data))
}

/// Batches the sensitivity of a trained model is measured on.
pub fn sensitivity_batches(config: &ExperimentConfig, data: &crate::data::TaskData) -> Vec<Batch> {
    let a = &config.analysis;
    let source = match a.sensitivity_split {
        Split::Train => &data.train,
        Split::Valid => &data.valid,
    };
    source.sampled_batches(a.sensitivity_batches, a.sensitivity_batch_size, a.sensitivity_seed)
}

/// Sensitivity scores of `params` and its pruning sweep, as configured.
pub fn analyze(
    config: &ExperimentConfig,
    data: &crate::data::TaskData,
    params: &ParameterVector,
) -> Result<(SensitivityReport, PruneSweepResult)> {
    let mlp = Mlp::new(config.model_config())?;
    let batches = sensitivity_batches(config, data);
    let report = per_parameter_scores(&mlp, params, &batches, None)?;
    let sweep = prune_sweep(&mlp, params, &report.scores, &data.valid, &config.analysis.sweep_ratios, &config.name)?;
    Ok((report, sweep))
}

fn metric_name(config: &ExperimentConfig) -> &'static str {
    match config.task {
        super::TaskKind::SyntheticClassification => "accuracy",
        super::TaskKind::SyntheticRegression => "mse",
    }
}

/// Trains per the config and writes every artifact plus the manifest into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate()?;
    create_dir(out)?;
    let started = Instant::now();
    let (trained, data) = train(config)?;
    let model_cfg = config.model_config();

    let mut artifacts = Artifacts {
        checkpoint: "model.ckpt".into(),
        final_checkpoint: "final.ckpt".into(),
        metrics: "metrics.csv".into(),
        validation: "validation.csv".into(),
        ..Artifacts::default()
    };
    write_checkpoint(&out.join(&artifacts.checkpoint), &model_cfg, &trained.best)?;
    write_checkpoint(&out.join(&artifacts.final_checkpoint), &model_cfg, &trained.final_params)?;
    write_metrics(&out.join(&artifacts.metrics), &trained.metrics)?;
    write_validation(&out.join(&artifacts.validation), &trained.metrics)?;

    let best = trained.metrics.best_checkpoint();
    let mut results = ManifestResults {
        best_step: best.step,
        valid_loss: best.valid.loss,
        valid_metric: best.valid.metric,
        metric_name: metric_name(config).into(),
        balance_std: None,
        drop_at_half: None,
    };

    if config.analysis.enabled {
        let (report, sweep) = analyze(config, &data, &trained.best)?;
        write_sensitivity(out, &report, &trained.best, config.analysis.visualization(), config.analysis.histogram_bins)?;
        write_sweep(&out.join("sweep.csv"), &sweep)?;
        artifacts.sensitivity = Some("sensitivity.csv".into());
        artifacts.sensitivity_summary = Some("sensitivity_summary.txt".into());
        artifacts.histogram = Some("histogram.csv".into());
        artifacts.sweep = Some("sweep.csv".into());
        results.balance_std = Some(balance_std(&report));
        results.drop_at_half = sweep.drop_at(STUDIED_MAX_RATIO);
    }

    let manifest = RunManifest {
        run: ManifestRun {
            name: config.name.clone(),
            mode: config.train.mode.name().into(),
            task: config.task.name().into(),
            seed: config.train.seeds.init,
            status: STATUS_COMPLETE.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_ms: started.elapsed().as_millis() as u64,
        },
        results,
        artifacts,
        config: config.clone(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

fn write_sensitivity(
    out: &Path,
    report: &SensitivityReport,
    params: &ParameterVector,
    protocol: VisualizationProtocol,
    bins: usize,
) -> Result<()> {
    write_report(&out.join("sensitivity.csv"), report, params)?;
    let shown = protocol.apply(&report.scores);
    let mut text = summary_text(report);
    let _ = writeln!(text, "histogram_trim = {}", fmt_f64(protocol.trim_top));
    let _ = writeln!(text, "histogram_sample = {}", fmt_f64(protocol.sample));
    let _ = writeln!(text, "histogram_count = {}", shown.len());
    let path = out.join("sensitivity_summary.txt");
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    write_histogram(&out.join("histogram.csv"), &histogram(&shown, bins))
}

/// Options for a standalone sensitivity export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub batches: usize,
    pub trim: f64,
    pub sample: f64,
    pub seed: u64,
    pub bins: usize,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        let v = VisualizationProtocol::default();
        Self {
            batches: 100,
            trim: v.trim_top,
            sample: v.sample,
            seed: 0,
            bins: 50,
        }
    }
}

fn load_matching(checkpoint: &Path, config: &ExperimentConfig) -> Result<(Mlp, ParameterVector)> {
    let (ckpt_cfg, params) = read_checkpoint(checkpoint)?;
    let want = config.model_config();
    if ckpt_cfg.layer_dims() != want.layer_dims() || ckpt_cfg.task != want.task {
        return Err(Error::Config(format!(
            "checkpoint {} has layers {:?}, config describes {:?}",
            checkpoint.display(),
            ckpt_cfg.layer_dims(),
            want.layer_dims()
        )));
    }
    Ok((Mlp::new(ckpt_cfg)?, params))
}

/// Writes `sensitivity.csv`, `sensitivity_summary.txt` and `histogram.csv`.
pub fn cmd_sensitivity(
    checkpoint: &Path,
    config: &ExperimentConfig,
    options: SensitivityOptions,
    out: &Path,
) -> Result<SensitivityReport> {
    let (mlp, params) = load_matching(checkpoint, config)?;
    let protocol = VisualizationProtocol {
        trim_top: options.trim,
        sample: options.sample,
        seed: options.seed,
    };
    protocol.validate()?;
    if options.batches == 0 {
        return Err(Error::Config("need at least one sensitivity batch".into()));
    }
    let data = config.generate_data()?;
    let mut analysis = config.analysis.clone();
    analysis.sensitivity_batches = options.batches;
    analysis.sensitivity_seed = options.seed;
    let cfg = ExperimentConfig {
        analysis,
        ..config.clone()
    };
    let batches = sensitivity_batches(&cfg, &data);
    let report = per_parameter_scores(&mlp, &params, &batches, None)?;
    create_dir(out)?;
    write_sensitivity(out, &report, &params, protocol, options.bins)?;
    Ok(report)
}

/// Writes `sweep.csv` for a checkpoint and a previously exported report.
pub fn cmd_sweep(
    checkpoint: &Path,
    report: &Path,
    config: &ExperimentConfig,
    ratios: &[f64],
    out: &Path,
) -> Result<PathBuf> {
    let (mlp, params) = load_matching(checkpoint, config)?;
    let scores = read_report_scores(report)?;
    if scores.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "report rows vs checkpoint parameters",
            left: scores.len(),
            right: params.len(),
        });
    }
    let data = config.generate_data()?;
    let sweep = prune_sweep(&mlp, &params, &scores, &data.valid, ratios, &config.name)?;
    create_dir(out)?;
    let path = out.join("sweep.csv");
    write_sweep(&path, &sweep)?;
    Ok(path)
}

/// `(x, α′)` rows for `samples` evenly spaced steps over `[0, n]`.
pub fn cmd_schedule(alpha: f64, p: f64, q: f64, n: usize, samples: usize) -> Result<String> {
    let schedule = AlphaSchedule::new(alpha, p, q, n)?;
    let mut out = String::from("x,alpha_prime\n");
    for (x, a) in schedule.curve(samples) {
        let _ = writeln!(out, "{x},{}", fmt_f64(a));
    }
    Ok(out)
}

/// Reads the manifest of a completed run directory.
pub fn load_run_summary(dir: &Path) -> Result<RunSummary> {
    let m = RunManifest::read(dir)?;
    if !m.is_complete() {
        return Err(Error::Compare(format!(
            "run {} is incomplete (status {})",
            dir.display(),
            m.run.status
        )));
    }
    for p in m.artifacts.paths() {
        let full = dir.join(p);
        if !full.exists() {
            return Err(Error::io(
                &full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "listed artifact missing"),
            ));
        }
    }
    let balance_std = m.results.balance_std.ok_or_else(|| {
        Error::Compare(format!("run {} has no sensitivity analysis", dir.display()))
    })?;
    Ok(RunSummary {
        name: dir.display().to_string(),
        mode: m.run.mode,
        task: m.run.task,
        seed: m.run.seed,
        valid_loss: m.results.valid_loss,
        valid_metric: m.results.valid_metric,
        balance_std,
        drop_at_half: m.results.drop_at_half,
    })
}

/// Compares runs against the first directory and writes `comparison.txt`.
pub fn cmd_compare(dirs: &[PathBuf], out: &Path) -> Result<(PathBuf, String)> {
    let runs = dirs
        .iter()
        .map(|d| load_run_summary(d))
        .collect::<Result<Vec<_>>>()?;
    let text = compare(&runs)?.render();
    create_dir(out)?;
    let path = out.join("comparison.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok((path, text))
}

/// Plain evaluation of a checkpoint on the config's validation split.
pub fn evaluate_checkpoint(checkpoint: &Path, config: &ExperimentConfig) -> Result<crate::trainer::Evaluation> {
    let (mlp, params) = load_matching(checkpoint, config)?;
    evaluate(&mlp, &params, &config.generate_data()?.valid)
}
