//! Divergences and loss assembly.
//!
//! Plain functions evaluate divergences on probability values; the
//! `record_*` functions build the same quantities on a [`Graph`] so they can be
//! differentiated. Everything is in nats, and every per-row quantity is
//! averaged over the batch.
//!
//! X-divergence over K passes with mean distribution `p̄`:
//!
//! ```text
//! X = (1/K) Σ_i KL(p_i ‖ p̄) + KL(p̄ ‖ p_i)
//!   = (1/K) Σ_i Σ_c (p_i[c] − p̄[c]) (ln p_i[c] − ln p̄[c])
//! ```
//!
//! The second form is what the graph records; each summand is nonnegative.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Task;

/// Floor applied to probabilities before any logarithm.
pub const PROB_EPSILON: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-9;

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_EPSILON).ln()
}

/// `KL(p ‖ q)` in nats with `0 · ln(0 / q) = 0`.
///
/// Fails when `q` has a zero where `p` does not; callers that need a finite
/// value on arbitrary inputs go through the clamped multi-pass divergences.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "kl operands",
            left: p.len(),
            right: q.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::ZeroSupport { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// `KL(p ‖ q)` with both sides floored at [`PROB_EPSILON`] inside the log.
pub fn kl_clamped(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (clamped_ln(pi) - clamped_ln(qi)))
        .sum()
}

/// K per-pass categorical distributions over a batch, laid out
/// `[pass][row][category]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBatch {
    k: usize,
    rows: usize,
    dims: usize,
    probs: Vec<f64>,
}

impl DistributionBatch {
    pub fn new(k: usize, rows: usize, dims: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 || rows == 0 || dims == 0 {
            return Err(Error::Distribution("k, rows and dims must be >= 1".into()));
        }
        if probs.len() != k * rows * dims {
            return Err(Error::LengthMismatch {
                what: "distribution batch values",
                left: k * rows * dims,
                right: probs.len(),
            });
        }
        for (slice_idx, slice) in probs.chunks(dims).enumerate() {
            if slice.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Distribution(format!(
                    "negative or non-finite entry in pass {} row {}",
                    slice_idx / rows,
                    slice_idx % rows
                )));
            }
            let total: f64 = slice.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Distribution(format!(
                    "pass {} row {} sums to {total}",
                    slice_idx / rows,
                    slice_idx % rows
                )));
            }
        }
        Ok(Self {
            k,
            rows,
            dims,
            probs,
        })
    }

    /// Builds a batch from one `[rows, dims]` distribution tensor per pass.
    pub fn from_passes(passes: &[Vec<Vec<f64>>]) -> Result<Self> {
        let k = passes.len();
        let rows = passes.first().map_or(0, Vec::len);
        let dims = passes
            .first()
            .and_then(|p| p.first())
            .map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(k * rows * dims);
        for pass in passes {
            if pass.len() != rows {
                return Err(Error::Distribution("passes differ in row count".into()));
            }
            for row in pass {
                if row.len() != dims {
                    return Err(Error::Distribution("rows differ in width".into()));
                }
                probs.extend_from_slice(row);
            }
        }
        Self::new(k, rows, dims, probs)
    }

    /// Exponentiates per-pass log-probability tensors of shape `[rows, dims]`.
    pub fn from_log_probs(passes: &[&Tensor]) -> Result<Self> {
        let first = passes.first().ok_or(Error::Empty("log-probability passes"))?;
        let (rows, dims) = first
            .dims2()
            .ok_or_else(|| Error::Distribution("log-probabilities must be rank 2".into()))?;
        let mut probs = Vec::with_capacity(passes.len() * rows * dims);
        for t in passes {
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "distribution batch",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            probs.extend(t.values().iter().map(|v| v.exp()));
        }
        Self::new(passes.len(), rows, dims, probs)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, pass: usize, row: usize) -> &[f64] {
        let start = (pass * self.rows + row) * self.dims;
        &self.probs[start..start + self.dims]
    }

    /// `p̄` for one row.
    pub fn mean_row(&self, row: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dims];
        for pass in 0..self.k {
            mean.iter_mut()
                .zip(self.row(pass, row))
                .for_each(|(m, &p)| *m += p);
        }
        mean.iter_mut().for_each(|m| *m /= self.k as f64);
        mean
    }

    /// Same batch with passes reordered so that new pass `i` is old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.k).collect::<Vec<_>>() {
            return Err(Error::Distribution(format!("{order:?} is not a permutation")));
        }
        let block = self.rows * self.dims;
        let mut probs = Vec::with_capacity(self.probs.len());
        for &src in order {
            probs.extend_from_slice(&self.probs[src * block..(src + 1) * block]);
        }
        Ok(Self { probs, ..*self })
    }

    fn require_multi(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Distribution(format!(
                "multi-pass divergence needs k >= 2, got {}",
                self.k
            )));
        }
        Ok(())
    }

    fn row_average(&self, per_row: impl Fn(usize) -> f64) -> f64 {
        (0..self.rows).map(per_row).sum::<f64>() / self.rows as f64
    }
}

/// The two halves of X-divergence, each averaged over rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XTerms {
    /// `(1/K) Σ_i KL(p_i ‖ p̄)`
    pub to_mean: f64,
    /// `(1/K) Σ_i KL(p̄ ‖ p_i)`
    pub from_mean: f64,
}

impl XTerms {
    pub fn total(&self) -> f64 {
        self.to_mean + self.from_mean
    }
}

pub fn x_divergence_terms(d: &DistributionBatch) -> Result<XTerms> {
    d.require_multi()?;
    let k = d.k as f64;
    let mut to_mean = 0.0;
    let mut from_mean = 0.0;
    for r in 0..d.rows {
        let mean = d.mean_row(r);
        for i in 0..d.k {
            let p = d.row(i, r);
            to_mean += kl_clamped(p, &mean);
            from_mean += kl_clamped(&mean, p);
        }
    }
    let norm = k * d.rows as f64;
    Ok(XTerms {
        to_mean: to_mean / norm,
        from_mean: from_mean / norm,
    })
}

pub fn x_divergence(d: &DistributionBatch) -> Result<f64> {
    x_divergence_terms(d).map(|t| t.total())
}

/// Forward-only half of X-divergence.
pub fn js_divergence(d: &DistributionBatch) -> Result<f64> {
    x_divergence_terms(d).map(|t| t.to_mean)
}

/// `Σ_i Σ_j KL(p_i ‖ p_j)`, averaged over rows.
pub fn pairwise_kl_sum(d: &DistributionBatch) -> Result<f64> {
    d.require_multi()?;
    Ok(d.row_average(|r| {
        let mut total = 0.0;
        for i in 0..d.k {
            for j in 0..d.k {
                total += kl_clamped(d.row(i, r), d.row(j, r));
            }
        }
        total
    }))
}

/// `Σ_i Σ_j KL(p_i ‖ p_j) + KL(p_j ‖ p_i)`, averaged over rows.
pub fn generalized_jeffrey(d: &DistributionBatch) -> Result<f64> {
    d.require_multi()?;
    Ok(d.row_average(|r| {
        let mut total = 0.0;
        for i in 0..d.k {
            for j in 0..d.k {
                let (p, q) = (d.row(i, r), d.row(j, r));
                total += kl_clamped(p, q) + kl_clamped(q, p);
            }
        }
        total
    }))
}

/// `(1/K) Σ_i mean((p_i − p̄)²)` over K equal-length output vectors.
pub fn mse_intra<T: AsRef<[f64]>>(passes: &[T]) -> Result<f64> {
    if passes.len() < 2 {
        return Err(Error::Distribution(format!(
            "mse intra-loss needs k >= 2, got {}",
            passes.len()
        )));
    }
    let n = passes[0].as_ref().len();
    if n == 0 {
        return Err(Error::Empty("mse intra-loss outputs"));
    }
    if let Some(bad) = passes.iter().find(|p| p.as_ref().len() != n) {
        return Err(Error::LengthMismatch {
            what: "mse intra-loss passes",
            left: n,
            right: bad.as_ref().len(),
        });
    }
    let k = passes.len() as f64;
    let mut total = 0.0;
    for c in 0..n {
        let mean = passes.iter().map(|p| p.as_ref()[c]).sum::<f64>() / k;
        total += passes
            .iter()
            .map(|p| (p.as_ref()[c] - mean).powi(2))
            .sum::<f64>();
    }
    Ok(total / (k * n as f64))
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One class label per row.
    Classes { labels: Vec<usize>, classes: usize },
    /// Row-major `[rows, output_dim]` regression targets.
    Values { values: Vec<f64>, width: usize },
}

impl Targets {
    pub fn rows(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values { values, width } => values.len() / (*width).max(1),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes { .. } => Task::Classification,
            Targets::Values { .. } => Task::Regression,
        }
    }

    fn check(&self, output: &Tensor) -> Result<()> {
        let (rows, cols) = output.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "task loss",
            lhs: output.shape().to_vec(),
            rhs: Vec::new(),
        })?;
        let expected = match self {
            Targets::Classes { labels, classes } => {
                if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::LabelOutOfRange {
                        label,
                        classes: *classes,
                    });
                }
                (labels.len(), *classes)
            }
            Targets::Values { width, .. } => (self.rows(), *width),
        };
        if (rows, cols) != expected {
            return Err(Error::ShapeMismatch {
                op: "task loss",
                lhs: output.shape().to_vec(),
                rhs: vec![expected.0, expected.1],
            });
        }
        Ok(())
    }

    /// One-hot `[rows, classes]` tensor for class targets, the target matrix otherwise.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Targets::Classes { labels, classes } => {
                let mut v = vec![0.0; labels.len() * classes];
                for (r, &l) in labels.iter().enumerate() {
                    v[r * classes + l] = 1.0;
                }
                Tensor::matrix(labels.len(), *classes, v).expect("sized above")
            }
            Targets::Values { values, width } => {
                Tensor::matrix(self.rows(), *width, values.clone()).expect("sized above")
            }
        }
    }
}

/// Mean NLL of log-probabilities for classification, MSE for regression.
pub fn task_loss(output: &Tensor, targets: &Targets) -> Result<f64> {
    targets.check(output)?;
    match targets {
        Targets::Classes { labels, .. } => {
            let nll: f64 = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -output.row(r)[l])
                .sum();
            Ok(nll / labels.len() as f64)
        }
        Targets::Values { values, .. } => {
            let se: f64 = output
                .values()
                .iter()
                .zip(values)
                .map(|(o, t)| (o - t).powi(2))
                .sum();
            Ok(se / values.len() as f64)
        }
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = log_probs.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (c, &v)| if v > row[best] { c } else { best });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Objective value with its breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub task_losses: Vec<f64>,
    pub task_mean: f64,
    pub intra: f64,
    pub alpha_prime: f64,
}

impl LossValue {
    pub fn breakdown(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (i, l) in self.task_losses.iter().enumerate() {
            m.insert(format!("task_loss_pass{i}"), *l);
        }
        m.insert("task_loss_mean".into(), self.task_mean);
        m.insert("intra_loss".into(), self.intra);
        m.insert("alpha_prime".into(), self.alpha_prime);
        m
    }
}

/// `mean(task_losses) + alpha_prime · intra`.
pub fn composite_loss(task_losses: &[f64], intra: f64, alpha_prime: f64) -> Result<LossValue> {
    if task_losses.is_empty() {
        return Err(Error::Empty("task losses"));
    }
    if !(alpha_prime >= 0.0) {
        return Err(Error::Schedule(format!(
            "strength must be nonnegative, got {alpha_prime}"
        )));
    }
    let task_mean = task_losses.iter().sum::<f64>() / task_losses.len() as f64;
    Ok(LossValue {
        total: task_mean + alpha_prime * intra,
        task_losses: task_losses.to_vec(),
        task_mean,
        intra,
        alpha_prime,
    })
}

// ---------------------------------------------------------------------------
// Graph-recorded versions

fn rows_of(graph: &Graph, v: Var) -> Result<usize> {
    graph
        .value(v)
        .dims2()
        .map(|(r, _)| r)
        .ok_or_else(|| Error::ShapeMismatch {
            op: "intra-loss",
            lhs: graph.value(v).shape().to_vec(),
            rhs: Vec::new(),
        })
}

fn mean_of(graph: &mut Graph, vars: &[Var]) -> Result<Var> {
    let total = graph.add_all(vars)?;
    graph.scale(total, 1.0 / vars.len() as f64)
}

/// X-divergence of K `[rows, dims]` log-probability outputs.
pub fn record_x_divergence(graph: &mut Graph, log_probs: &[Var]) -> Result<Var> {
    record_mean_divergence(graph, log_probs, true)
}

/// JS-style forward half: `(1/K) Σ_i KL(p_i ‖ p̄)`.
pub fn record_js_divergence(graph: &mut Graph, log_probs: &[Var]) -> Result<Var> {
    record_mean_divergence(graph, log_probs, false)
}

fn record_mean_divergence(graph: &mut Graph, log_probs: &[Var], symmetric: bool) -> Result<Var> {
    let k = log_probs.len();
    if k < 2 {
        return Err(Error::Distribution(format!(
            "multi-pass divergence needs k >= 2, got {k}"
        )));
    }
    let rows = rows_of(graph, log_probs[0])?;
    let probs = log_probs
        .iter()
        .map(|&lp| graph.exp(lp))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_of(graph, &probs)?;
    let log_mean = graph.ln(mean)?;
    let mut terms = Vec::with_capacity(k);
    for (&p, &lp) in probs.iter().zip(log_probs) {
        let log_ratio = graph.sub(lp, log_mean)?;
        let weight = if symmetric { graph.sub(p, mean)? } else { p };
        terms.push(graph.mul(weight, log_ratio)?);
    }
    let total = graph.add_all(&terms)?;
    let total = graph.sum(total)?;
    graph.scale(total, 1.0 / (k * rows) as f64)
}

/// MSE intra-loss of K equally shaped outputs.
pub fn record_mse_intra(graph: &mut Graph, outputs: &[Var]) -> Result<Var> {
    let k = outputs.len();
    if k < 2 {
        return Err(Error::Distribution(format!(
            "mse intra-loss needs k >= 2, got {k}"
        )));
    }
    let n = graph.value(outputs[0]).len();
    let mean = mean_of(graph, outputs)?;
    let mut terms = Vec::with_capacity(k);
    for &o in outputs {
        let d = graph.sub(o, mean)?;
        terms.push(graph.square(d)?);
    }
    let total = graph.add_all(&terms)?;
    let total = graph.sum(total)?;
    graph.scale(total, 1.0 / (k * n) as f64)
}

/// Task loss on a recorded output: NLL of log-probabilities or MSE.
pub fn record_task_loss(graph: &mut Graph, output: Var, targets: &Targets) -> Result<Var> {
    targets.check(graph.value(output))?;
    let target = graph.constant(targets.to_tensor());
    match targets {
        Targets::Classes { labels, .. } => {
            let picked = graph.mul(output, target)?;
            let total = graph.sum(picked)?;
            graph.scale(total, -1.0 / labels.len() as f64)
        }
        Targets::Values { .. } => {
            let d = graph.sub(output, target)?;
            let sq = graph.square(d)?;
            graph.mean(sq)
        }
    }
}

/// `KL(p_teacher ‖ p_student)` averaged over rows; the teacher is a constant.
pub fn record_kl_from_teacher(
    graph: &mut Graph,
    student_log_probs: Var,
    teacher_probs: &Tensor,
) -> Result<Var> {
    let rows = rows_of(graph, student_log_probs)?;
    let log_teacher = Tensor::new(
        teacher_probs.shape().to_vec(),
        teacher_probs.values().iter().map(|&p| clamped_ln(p)).collect(),
    )?;
    let p = graph.constant(teacher_probs.clone());
    let lt = graph.constant(log_teacher);
    let ratio = graph.sub(lt, student_log_probs)?;
    let weighted = graph.mul(p, ratio)?;
    let total = graph.sum(weighted)?;
    graph.scale(total, 1.0 / rows as f64)
}
