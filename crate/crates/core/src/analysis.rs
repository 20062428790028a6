//! Post-training studies: one-shot sensitivity-ordered pruning and run
//! comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mlp, ParameterSubset, ParameterVector};
use crate::trainer::evaluate;
use crate::util::{fmt_f64, median};

/// Ratios past this point go beyond the range studied for translation models.
pub const STUDIED_MAX_RATIO: f64 = 0.5;

/// Default sweep grid `0, 0.1, ..., 0.9`.
pub fn default_ratios() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// `⌊ratio · total⌋`, tolerant of representation error in `ratio`.
pub fn prune_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Flat indices in ascending score order, ties broken by lower index.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Zeroes the `⌊ratio · total⌋` least sensitive parameters.
pub fn prune_lowest(params: &ParameterVector, scores: &[f64], ratio: f64) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::PruneRatio(ratio));
    }
    if scores.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs parameters",
            left: scores.len(),
            right: params.len(),
        });
    }
    let n = prune_count(ratio, params.len());
    let selected = ascending_order(scores)[..n].to_vec();
    params.zero_out(&ParameterSubset::new(selected, params.len())?)
}

/// Checks the sweep grid: within `[0, 1]`, starts at 0, strictly increasing.
pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::PruneRatio(bad));
    }
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    if ratios.first() != Some(&0.0) || !increasing {
        return Err(Error::RatioOrder(ratios.to_vec()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub ratio: f64,
    pub metric: f64,
    /// `metric(0) − metric(ratio)`.
    pub metric_drop: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSweepResult {
    pub model_tag: String,
    pub points: Vec<SweepPoint>,
}

impl PruneSweepResult {
    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.ratio).collect()
    }

    pub fn drop_at(&self, ratio: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.ratio - ratio).abs() < 1e-12)
            .map(|p| p.metric_drop)
    }

    pub fn extends_past_studied_range(&self) -> bool {
        self.points.iter().any(|p| p.ratio > STUDIED_MAX_RATIO)
    }
}

/// Evaluates one-shot prunes of the original parameters at every ratio.
pub fn prune_sweep(
    mlp: &Mlp,
    params: &ParameterVector,
    scores: &[f64],
    dataset: &Dataset,
    ratios: &[f64],
    model_tag: &str,
) -> Result<PruneSweepResult> {
    validate_ratios(ratios)?;
    let mut points: Vec<SweepPoint> = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let pruned = prune_lowest(params, scores, ratio)?;
        let e = evaluate(mlp, &pruned, dataset)?;
        let base = points.first().map_or(e.metric, |p| p.metric);
        points.push(SweepPoint {
            ratio,
            metric: e.metric,
            metric_drop: base - e.metric,
            loss: e.loss,
        });
    }
    Ok(PruneSweepResult {
        model_tag: model_tag.to_string(),
        points,
    })
}

pub fn write_sweep(path: &Path, sweep: &PruneSweepResult) -> Result<()> {
    let mut out = String::from("ratio,metric,metric_drop,loss\n");
    for p in &sweep.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(p.ratio),
            fmt_f64(p.metric),
            fmt_f64(p.metric_drop),
            fmt_f64(p.loss)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let meta = format!(
        "model_tag = {}\npoints = {}\nextends_past_studied_range = {}\n",
        sweep.model_tag,
        sweep.points.len(),
        sweep.extends_past_studied_range()
    );
    let meta_path = crate::model::metadata_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

pub fn read_sweep(path: &Path) -> Result<PruneSweepResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("ratio,metric,metric_drop,loss") {
        return Err(Error::format(path, "missing sweep header"));
    }
    let points = lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<f64> = line
                .split(',')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("bad row {}", i + 2)))?;
            match cols.as_slice() {
                &[ratio, metric, metric_drop, loss] => Ok(SweepPoint {
                    ratio,
                    metric,
                    metric_drop,
                    loss,
                }),
                _ => Err(Error::format(path, format!("row {} needs 4 columns", i + 2))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PruneSweepResult {
        model_tag: tag,
        points,
    })
}

/// Headline numbers of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub mode: String,
    pub task: String,
    pub seed: u64,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub balance_std: f64,
    pub drop_at_half: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: RunSummary,
    pub delta_metric: f64,
    pub delta_loss: f64,
    pub std_ratio: f64,
    pub delta_drop_at_half: Option<f64>,
}

/// A reference run against which the others are contrasted, plus seed-paired
/// ratios between the reference mode and every other mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: RunSummary,
    pub rows: Vec<ComparisonRow>,
    /// `(mode, seed, std ratio vs reference-mode run with the same seed)`
    pub paired: Vec<(String, u64, f64)>,
    pub median_paired_std_ratio: Option<f64>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Contrasts runs against the first one. All runs must share a task.
pub fn compare(runs: &[RunSummary]) -> Result<Comparison> {
    let reference = runs
        .first()
        .ok_or_else(|| Error::Compare("need at least two runs".into()))?;
    if runs.len() < 2 {
        return Err(Error::Compare("need at least two runs".into()));
    }
    if let Some(other) = runs.iter().find(|r| r.task != reference.task) {
        return Err(Error::Compare(format!(
            "task mismatch: {} is {} but {} is {}",
            reference.name, reference.task, other.name, other.task
        )));
    }
    let rows = runs
        .iter()
        .map(|r| ComparisonRow {
            run: r.clone(),
            delta_metric: r.valid_metric - reference.valid_metric,
            delta_loss: r.valid_loss - reference.valid_loss,
            std_ratio: ratio(r.balance_std, reference.balance_std),
            delta_drop_at_half: r
                .drop_at_half
                .zip(reference.drop_at_half)
                .map(|(a, b)| a - b),
        })
        .collect();

    let mut paired = Vec::new();
    for r in runs.iter().filter(|r| r.mode != reference.mode) {
        if let Some(base) = runs
            .iter()
            .find(|b| b.mode == reference.mode && b.seed == r.seed)
        {
            paired.push((r.mode.clone(), r.seed, ratio(r.balance_std, base.balance_std)));
        }
    }
    let median_paired_std_ratio = (!paired.is_empty())
        .then(|| median(&paired.iter().map(|p| p.2).collect::<Vec<_>>()));
    Ok(Comparison {
        reference: reference.clone(),
        rows,
        paired,
        median_paired_std_ratio,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt_f64)
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "reference = {}", self.reference.name);
        let _ = writeln!(out, "task = {}", self.reference.task);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "run,mode,seed,valid_metric,valid_loss,balance_std,drop_at_half,delta_metric,delta_loss,std_ratio,delta_drop_at_half"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.run.name,
                r.run.mode,
                r.run.seed,
                fmt_f64(r.run.valid_metric),
                fmt_f64(r.run.valid_loss),
                fmt_f64(r.run.balance_std),
                opt(r.run.drop_at_half),
                fmt_f64(r.delta_metric),
                fmt_f64(r.delta_loss),
                fmt_f64(r.std_ratio),
                opt(r.delta_drop_at_half)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "mode,seed,paired_std_ratio");
        for (mode, seed, r) in &self.paired {
            let _ = writeln!(out, "{mode},{seed},{}", fmt_f64(*r));
        }
        let _ = writeln!(
            out,
            "\nmedian_paired_std_ratio = {}",
            opt(self.median_paired_std_ratio)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{RngStream, Tensor};
    use crate::data::{gaussian_clusters, ClusterSpec};
    use crate::model::{MlpConfig, Task};
    use proptest::prelude::*;

    fn four() -> ParameterVector {
        ParameterVector::from_segments(vec![("w".into(), Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]))])
    }

    #[test]
    fn prune_examples() {
        let p = four();
        let scores = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(prune_lowest(&p, &scores, 0.0).unwrap(), p);
        assert_eq!(prune_lowest(&p, &scores, 1.0).unwrap().values(), &[0.0; 4]);
        assert_eq!(
            prune_lowest(&p, &scores, 0.5).unwrap().values(),
            &[1.0, 0.0, 3.0, 0.0]
        );
        assert!(matches!(
            prune_lowest(&p, &scores, 1.5),
            Err(Error::PruneRatio(_))
        ));
    }

    #[test]
    fn ties_break_by_index() {
        let p = four();
        assert_eq!(
            prune_lowest(&p, &[0.0, 0.0, 0.0, 0.0], 0.5).unwrap().values(),
            &[0.0, 0.0, 3.0, 4.0]
        );
    }

    #[test]
    fn count_tolerates_representation_error() {
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.5, 75), 37);
    }

    #[test]
    fn ratio_validation() {
        assert!(validate_ratios(&[0.0]).is_ok());
        assert!(validate_ratios(&default_ratios()).is_ok());
        assert!(matches!(
            validate_ratios(&[0.0, 0.5, 0.3]),
            Err(Error::RatioOrder(_))
        ));
        assert!(validate_ratios(&[0.1, 0.5]).is_err());
        assert!(validate_ratios(&[0.0, 0.0]).is_err());
    }

    fn sweep_setup() -> (Mlp, ParameterVector, Dataset) {
        let mlp = Mlp::new(MlpConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            output_dim: 2,
            task: Task::Classification,
            dropout: 0.0,
        })
        .unwrap();
        let params = mlp.init(&mut RngStream::new(8, 0));
        let data = gaussian_clusters(&ClusterSpec {
            train_samples: 10,
            valid_samples: 30,
            dim: 3,
            classes: 2,
            margin: 1.0,
            label_noise: 0.0,
            clusters_per_class: 1,
            seed: 4,
        })
        .unwrap();
        (mlp, params, data.valid)
    }

    #[test]
    fn sweep_starts_at_plain_evaluation() {
        let (mlp, params, valid) = sweep_setup();
        let scores: Vec<f64> = params.values().iter().map(|v| v.abs()).collect();
        let s = prune_sweep(&mlp, &params, &scores, &valid, &[0.0], "m").unwrap();
        let e = evaluate(&mlp, &params, &valid).unwrap();
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.points[0].metric, e.metric);
        assert_eq!(s.points[0].loss, e.loss);
        assert_eq!(s.points[0].metric_drop, 0.0);

        let full = prune_sweep(&mlp, &params, &scores, &valid, &default_ratios(), "m").unwrap();
        assert_eq!(full.points.len(), 10);
        assert!(full.extends_past_studied_range());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep(&path, &full).unwrap();
        let back = read_sweep(&path).unwrap();
        assert_eq!(back.points, full.points);
    }

    fn summary(name: &str, mode: &str, seed: u64, std: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            mode: mode.into(),
            task: "synthetic-classification".into(),
            seed,
            valid_loss: 0.5,
            valid_metric: 0.8,
            balance_std: std,
            drop_at_half: Some(0.1),
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let a = summary("a", "standard", 1, 0.3);
        let c = compare(&[a.clone(), a]).unwrap();
        for r in &c.rows {
            assert_eq!(r.delta_metric, 0.0);
            assert_eq!(r.delta_loss, 0.0);
            assert_eq!(r.std_ratio, 1.0);
            assert_eq!(r.delta_drop_at_half, Some(0.0));
        }
    }

    #[test]
    fn paired_ratios_match_seeds() {
        let runs = [
            summary("b1", "standard", 1, 0.4),
            summary("b2", "standard", 2, 0.5),
            summary("i1", "intra", 1, 0.2),
            summary("i2", "intra", 2, 0.4),
        ];
        let c = compare(&runs).unwrap();
        assert_eq!(c.paired.len(), 2);
        assert_eq!(c.median_paired_std_ratio, Some(0.65));
        assert!(c.render().contains("median_paired_std_ratio"));
    }

    #[test]
    fn task_mismatch_rejected() {
        let a = summary("a", "standard", 1, 0.3);
        let mut b = a.clone();
        b.task = "synthetic-regression".into();
        assert!(matches!(compare(&[a, b]), Err(Error::Compare(_))));
    }

    proptest! {
        #[test]
        fn prune_partitions_and_nests(scores in proptest::collection::vec(0.0f64..3.0, 1..60),
                                      r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
            let n = scores.len();
            let p = ParameterVector::from_segments(vec![("w".into(), Tensor::vector(vec![1.0; n]))]);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = prune_lowest(&p, &scores, lo).unwrap();
            let b = prune_lowest(&p, &scores, hi).unwrap();
            let zeroed_a = a.values().iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(zeroed_a, prune_count(lo, n));
            for i in 0..n {
                if a.values()[i] == 0.0 {
                    prop_assert_eq!(b.values()[i], 0.0);
                }
            }
            prop_assert_eq!(prune_lowest(&p, &scores, lo).unwrap(), a);
        }
    }
}
