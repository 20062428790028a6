//! Parameter sensitivity: the loss change when parameters are zeroed, its
//! first-order estimate `|θ_sᵀ ∇L|`, and summary statistics of per-parameter
//! scores.
//!
//! All measurements run in evaluation mode against the plain task loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Graph, RngStream};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{flatten_gradients, Mlp, ParameterSubset, ParameterVector};
use crate::objective::{record_task_loss, task_loss};
use crate::util::fmt_f64;

pub const PERCENTILES: [u8; 7] = [1, 5, 25, 50, 75, 95, 99];
/// Share of the score mass held by this top fraction is reported in summaries.
pub const TOP_SHARE_FRACTION: f64 = 0.2;

/// Mean evaluation-mode task loss over `batches` (each batch weighted equally).
pub fn mean_loss(mlp: &Mlp, params: &ParameterVector, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("evaluation batches"));
    }
    let mut total = 0.0;
    for b in batches {
        total += task_loss(&mlp.predict(params, &b.inputs)?, &b.targets)?;
    }
    Ok(total / batches.len() as f64)
}

/// Mean loss and its gradient with respect to every parameter.
pub fn loss_gradient(
    mlp: &Mlp,
    params: &ParameterVector,
    batches: &[Batch],
) -> Result<(f64, Vec<f64>)> {
    if batches.is_empty() {
        return Err(Error::Empty("evaluation batches"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for b in batches {
        let mut g = Graph::new();
        let bound = mlp.bind(&mut g, params, true)?;
        let x = g.constant(b.inputs.clone());
        let out = mlp.forward(&mut g, &bound, x, None)?;
        let l = record_task_loss(&mut g, out, &b.targets)?;
        loss += g.value(l).values()[0];
        let grads = g.backward(l)?;
        for (acc, v) in grad.iter_mut().zip(flatten_gradients(&grads, &bound, params)) {
            *acc += v;
        }
    }
    let n = batches.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// `|L(Θ) − L(Θ with the subset zeroed)|`.
pub fn exact_sensitivity(
    mlp: &Mlp,
    params: &ParameterVector,
    subset: &ParameterSubset,
    batches: &[Batch],
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Empty("sensitivity subset"));
    }
    let full = mean_loss(mlp, params, batches)?;
    let zeroed = mean_loss(mlp, &params.zero_out(subset)?, batches)?;
    Ok((full - zeroed).abs())
}

/// `|Σ_{i ∈ subset} θ_i g_i|` with `g` the loss gradient at `params`.
pub fn approx_sensitivity(
    params: &ParameterVector,
    gradients: &[f64],
    subset: &ParameterSubset,
) -> Result<f64> {
    if gradients.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "gradients vs parameters",
            left: params.len(),
            right: gradients.len(),
        });
    }
    let mut dot = 0.0;
    for &i in subset.indices() {
        let theta = params.values().get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            total: params.len(),
        })?;
        dot += theta * gradients[i];
    }
    Ok(dot.abs())
}

/// Top-trim and subsampling applied before summarizing, for plotting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualizationProtocol {
    /// Fraction of highest scores removed.
    pub trim_top: f64,
    /// Fraction of the remaining scores kept, sampled without replacement.
    pub sample: f64,
    pub seed: u64,
}

impl Default for VisualizationProtocol {
    fn default() -> Self {
        Self {
            trim_top: 0.01,
            sample: 0.10,
            seed: 0,
        }
    }
}

impl VisualizationProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.trim_top) || !(self.sample > 0.0 && self.sample <= 1.0) {
            return Err(Error::Config(format!(
                "trim must be in [0, 1) and sample in (0, 1], got {} and {}",
                self.trim_top, self.sample
            )));
        }
        Ok(())
    }

    /// Drops the top `trim_top` scores, then samples `sample` of the rest.
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let trimmed = (sorted.len() as f64 * self.trim_top).floor() as usize;
        sorted.truncate(sorted.len() - trimmed);
        if self.sample >= 1.0 {
            return sorted;
        }
        let keep = ((sorted.len() as f64 * self.sample).round() as usize).max(1);
        let mut rng = RngStream::new(self.seed, 0);
        let order = rng.permutation(sorted.len());
        let mut picked: Vec<f64> = order[..keep.min(sorted.len())]
            .iter()
            .map(|&i| sorted[i])
            .collect();
        picked.sort_by(f64::total_cmp);
        picked
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub percentiles: Vec<(u8, f64)>,
    /// Fraction of the total score held by the top [`TOP_SHARE_FRACTION`].
    pub top_share: f64,
}

impl Summary {
    pub fn of(scores: &[f64]) -> Self {
        let n = scores.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: 0.0,
                std: 0.0,
                percentiles: PERCENTILES.iter().map(|&p| (p, 0.0)).collect(),
                top_share: 0.0,
            };
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let percentiles = PERCENTILES
            .iter()
            .map(|&p| (p, percentile(&sorted, p as f64)))
            .collect();
        let total: f64 = sorted.iter().sum();
        let top = top_count(n, TOP_SHARE_FRACTION);
        let top_share = if total > 0.0 {
            sorted[n - top..].iter().sum::<f64>() / total
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            std: var.sqrt(),
            percentiles,
            top_share,
        }
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = pct / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

fn top_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.max(1))
}

/// Per-parameter scores `|θ_i ḡ_i|` aligned with flat indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub scores: Vec<f64>,
    pub batch_count: usize,
    pub visualization: Option<VisualizationProtocol>,
    pub summary: Summary,
}

impl SensitivityReport {
    pub fn from_scores(
        scores: Vec<f64>,
        batch_count: usize,
        visualization: Option<VisualizationProtocol>,
    ) -> Self {
        let summary = match &visualization {
            Some(v) => Summary::of(&v.apply(&scores)),
            None => Summary::of(&scores),
        };
        Self {
            scores,
            batch_count,
            visualization,
            summary,
        }
    }

    pub fn trim_fraction(&self) -> f64 {
        self.visualization.map_or(0.0, |v| v.trim_top)
    }
}

pub fn per_parameter_scores(
    mlp: &Mlp,
    params: &ParameterVector,
    batches: &[Batch],
    visualization: Option<VisualizationProtocol>,
) -> Result<SensitivityReport> {
    if let Some(v) = &visualization {
        v.validate()?;
    }
    let (_, grad) = loss_gradient(mlp, params, batches)?;
    let scores = params
        .values()
        .iter()
        .zip(&grad)
        .map(|(t, g)| (t * g).abs())
        .collect();
    Ok(SensitivityReport::from_scores(
        scores,
        batches.len(),
        visualization,
    ))
}

/// Degree of contribution balance: lower is more balanced.
pub fn balance_std(report: &SensitivityReport) -> f64 {
    report.summary.std
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    /// Mean score of the current top `fraction` of parameters.
    pub top_mean: f64,
    /// Mean score of the rest; `None` when the top set is everything.
    pub rest_mean: Option<f64>,
}

/// Top-versus-rest mean sensitivity for each report, re-ranked per report.
pub fn top_bottom_track(history: &[SensitivityReport], fraction: f64) -> Result<Vec<TrackPoint>> {
    if history.is_empty() {
        return Err(Error::Empty("sensitivity history"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction {fraction} outside (0, 1]")));
    }
    Ok(history
        .iter()
        .map(|r| {
            let mut sorted = r.scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let n = sorted.len();
            let top = top_count(n, fraction);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            TrackPoint {
                top_mean: if n == 0 { 0.0 } else { mean(&sorted[..top]) },
                rest_mean: (top < n).then(|| mean(&sorted[top..])),
            }
        })
        .collect())
}

/// Equal-width histogram as `(bin_left, bin_right, count)` rows.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    if scores.is_empty() {
        return Vec::new();
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

pub fn write_report(path: &Path, report: &SensitivityReport, params: &ParameterVector) -> Result<()> {
    if report.scores.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "report scores vs parameters",
            left: report.scores.len(),
            right: params.len(),
        });
    }
    let mut out = String::from("flat_index,layer,score\n");
    for (i, s) in report.scores.iter().enumerate() {
        let layer = params.layer_name(i).unwrap_or("?");
        let _ = writeln!(out, "{i},{layer},{}", fmt_f64(*s));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn summary_text(report: &SensitivityReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    let _ = writeln!(out, "parameters = {}", report.scores.len());
    let _ = writeln!(out, "batch_count = {}", report.batch_count);
    let _ = writeln!(out, "trim_fraction = {}", fmt_f64(report.trim_fraction()));
    let _ = writeln!(
        out,
        "sample_fraction = {}",
        fmt_f64(report.visualization.map_or(1.0, |v| v.sample))
    );
    let _ = writeln!(out, "summarized = {}", s.count);
    let _ = writeln!(out, "mean = {}", fmt_f64(s.mean));
    let _ = writeln!(out, "std = {}", fmt_f64(s.std));
    for (p, v) in &s.percentiles {
        let _ = writeln!(out, "p{p} = {}", fmt_f64(*v));
    }
    let _ = writeln!(out, "top20_share = {}", fmt_f64(s.top_share));
    out
}

/// Reads the `score` column of a report written by [`write_report`].
pub fn read_report_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("flat_index,layer,score") {
        return Err(Error::format(path, "missing report header"));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let mut cols = line.split(',');
            let idx = cols.next().and_then(|c| c.parse::<usize>().ok());
            let score = cols.nth(1).and_then(|c| c.parse::<f64>().ok());
            match (idx, score) {
                (Some(i), Some(s)) if i == row => Ok(s),
                _ => Err(Error::format(path, format!("bad row {}", row + 2))),
            }
        })
        .collect()
}

pub fn write_histogram(path: &Path, rows: &[(f64, f64, usize)]) -> Result<()> {
    let mut out = String::from("bin_left,bin_right,count\n");
    for (l, r, c) in rows {
        let _ = writeln!(out, "{},{},{c}", fmt_f64(*l), fmt_f64(*r));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
