//! Training loops: single-pass baseline, K-pass intra-distillation and
//! teacher-student self-distillation.
//!
//! Every step draws one minibatch, records the whole objective on a fresh
//! graph and runs exactly one backward sweep. Dropout masks for pass `i` at
//! update `x` come from stream [`pass_stream_id`]`(x, i)`, so runs replay
//! bit-for-bit from their seeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{pass_stream_id, Graph, RngStream, Tensor, Var};
use crate::data::{BatchSampler, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::model::{flatten_gradients, Mlp, MlpConfig, ParameterVector, Task};
use crate::objective::{
    accuracy, composite_loss, record_js_divergence, record_kl_from_teacher, record_mse_intra,
    record_task_loss, record_x_divergence, task_loss, LossValue, Targets,
};
use crate::schedule::{AlphaSchedule, Strength};

const INIT_STREAM: u64 = 0x1A << 56;
const DATA_ORDER_STREAM: u64 = 0xDA << 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            dropout: seed,
        }
    }
}

/// Divergence used to pull the K pass outputs together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraLoss {
    XDivergence,
    Js,
    Mse,
}

impl IntraLoss {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classification => IntraLoss::XDivergence,
            Task::Regression => IntraLoss::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthConfig {
    pub alpha: f64,
    pub p: f64,
    pub q: f64,
    /// `false` keeps α′ = α for the whole run.
    pub adaptive: bool,
}

impl StrengthConfig {
    pub fn resolve(&self, steps: usize) -> Result<Strength> {
        let schedule = AlphaSchedule::new(self.alpha, self.p, self.q, steps)?;
        Ok(if self.adaptive {
            Strength::Adaptive(schedule)
        } else {
            Strength::Constant(schedule.alpha())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: MlpConfig,
    pub passes: usize,
    pub strength: StrengthConfig,
    pub intra_loss: Option<IntraLoss>,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seeds: Seeds,
    pub checkpoint_every: usize,
    /// Every pass reuses the masks of pass 0.
    pub shared_masks: bool,
    /// Weight of the label NLL term in self-distillation.
    pub self_distill_task_weight: f64,
    /// Keep a parameter copy at every checkpoint.
    pub keep_snapshots: bool,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TrainConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        if !(self.optimizer.learning_rate >= 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss_mean: f64,
    pub intra_loss: f64,
    pub alpha_prime: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Accuracy for classification, MSE for regression.
    pub metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub valid: Evaluation,
}

#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub steps: Vec<StepRecord>,
    /// Milliseconds since the start of the run, aligned with `steps`.
    pub wall_ms: Vec<u64>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Index into `checkpoints` of the lowest validation loss (earliest on ties).
    pub best: usize,
    pub snapshots: Vec<(usize, ParameterVector)>,
}

impl TrainMetrics {
    /// Equality of everything except wall-clock timings.
    pub fn trajectory_eq(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.checkpoints == other.checkpoints
            && self.best == other.best
    }

    pub fn best_checkpoint(&self) -> &CheckpointRecord {
        &self.checkpoints[self.best]
    }

    pub fn checkpoint_at(&self, step: usize) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters at the best validation checkpoint.
    pub best: ParameterVector,
    pub final_params: ParameterVector,
    pub initial: ParameterVector,
    pub metrics: TrainMetrics,
}

/// Evaluation-mode loss and metric over a whole dataset.
pub fn evaluate(mlp: &Mlp, params: &ParameterVector, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let batch = dataset.full_batch();
    let out = mlp.predict(params, &batch.inputs)?;
    let loss = task_loss(&out, &batch.targets)?;
    let metric = match &batch.targets {
        Targets::Classes { labels, .. } => accuracy(&out, labels),
        Targets::Values { .. } => loss,
    };
    Ok(Evaluation { loss, metric })
}

pub fn train_standard(config: &TrainConfig, data: &TaskData) -> Result<TrainedModel> {
    run(config, data, Mode::Standard)
}

pub fn train_intra_distill(config: &TrainConfig, data: &TaskData) -> Result<TrainedModel> {
    if config.passes < 2 {
        return Err(Error::TrainConfig(format!(
            "intra-distillation needs at least 2 passes, got {}",
            config.passes
        )));
    }
    run(config, data, Mode::Intra)
}

pub fn train_self_distill(
    config: &TrainConfig,
    data: &TaskData,
    teacher: &ParameterVector,
) -> Result<TrainedModel> {
    if config.model.task != Task::Classification {
        return Err(Error::TrainConfig(
            "self-distillation is defined for classification".into(),
        ));
    }
    if teacher.len() != config.model.parameter_count() {
        return Err(Error::TrainConfig(format!(
            "teacher has {} parameters, student needs {}",
            teacher.len(),
            config.model.parameter_count()
        )));
    }
    run(config, data, Mode::SelfDistill(teacher))
}

/// Seed offset between successive self-distillation generations.
pub const GENERATION_SEED_STRIDE: u64 = 1000;

/// A standard-trained teacher followed by `rounds` self-distilled students,
/// each taught by the previous generation. Every generation starts from a
/// fresh initialization: generation `g` shifts all seeds by
/// `g · GENERATION_SEED_STRIDE`.
pub fn self_distill_generations(
    config: &TrainConfig,
    data: &TaskData,
    rounds: usize,
) -> Result<Vec<TrainedModel>> {
    let mut out = vec![train_standard(config, data)?];
    for g in 1..=rounds as u64 {
        let shift = g * GENERATION_SEED_STRIDE;
        let mut student = config.clone();
        student.seeds = Seeds {
            init: config.seeds.init.wrapping_add(shift),
            data: config.seeds.data.wrapping_add(shift),
            dropout: config.seeds.dropout.wrapping_add(shift),
        };
        let teacher = &out.last().expect("teacher trained").best;
        let next = train_self_distill(&student, data, teacher)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Mode<'a> {
    Standard,
    Intra,
    SelfDistill(&'a ParameterVector),
}

struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(config: OptimizerConfig, n: usize) -> Self {
        Self {
            config,
            first: vec![0.0; n],
            second: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i] + wd * *p;
                    self.first[i] = Self::BETA1 * self.first[i] + (1.0 - Self::BETA1) * g;
                    self.second[i] = Self::BETA2 * self.second[i] + (1.0 - Self::BETA2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    *p -= lr * m / (v.sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            reason: e.to_string(),
        },
        other => other,
    }
}

fn run(config: &TrainConfig, data: &TaskData, mode: Mode<'_>) -> Result<TrainedModel> {
    config.validate()?;
    let mlp = Mlp::new(config.model.clone())?;
    if data.train.dim() != config.model.input_dim || data.train.task() != config.model.task {
        return Err(Error::TrainConfig(
            "dataset does not match the model input width or task".into(),
        ));
    }
    let strength = config.strength.resolve(config.steps)?;
    let intra_kind = config
        .intra_loss
        .unwrap_or_else(|| IntraLoss::default_for(config.model.task));
    if intra_kind != IntraLoss::Mse && config.model.task == Task::Regression {
        return Err(Error::TrainConfig(
            "regression outputs need the mse intra-loss".into(),
        ));
    }

    let initial = mlp.init(&mut RngStream::new(config.seeds.init, INIT_STREAM));
    let mut params = initial.clone();
    let mut optimizer = Optimizer::new(config.optimizer.clone(), params.len());
    let mut sampler = BatchSampler::new(
        data.train.len(),
        config.batch_size,
        RngStream::new(config.seeds.data, DATA_ORDER_STREAM),
    );

    let started = Instant::now();
    let mut metrics = TrainMetrics::default();
    let mut best = params.clone();
    let mut checkpoint = |step: usize, params: &ParameterVector, metrics: &mut TrainMetrics| {
        let valid = evaluate(&mlp, params, &data.valid).map_err(diverged(step))?;
        metrics.checkpoints.push(CheckpointRecord { step, valid });
        let best_loss = metrics.checkpoints[metrics.best].valid.loss;
        if metrics.checkpoints.len() == 1 || valid.loss < best_loss {
            metrics.best = metrics.checkpoints.len() - 1;
            best = params.clone();
        }
        if config.keep_snapshots {
            metrics.snapshots.push((step, params.clone()));
        }
        Ok::<_, Error>(())
    };
    checkpoint(0, &params, &mut metrics)?;

    for x in 0..config.steps {
        let batch = data.train.batch(&sampler.next_rows());
        let mut graph = Graph::new();
        let bound = mlp.bind(&mut graph, &params, true)?;
        let input = graph.constant(batch.inputs.clone());
        let rows = batch.rows();
        let masks_for = |pass: usize| {
            let stream = if config.shared_masks { 0 } else { pass };
            mlp.draw_masks(
                &mut RngStream::new(config.seeds.dropout, pass_stream_id(x, stream)),
                rows,
            )
        };

        let (root, value) = match mode {
            Mode::Standard => {
                let masks = masks_for(0)?;
                let out = mlp
                    .forward(&mut graph, &bound, input, Some(&masks))
                    .map_err(diverged(x))?;
                let loss = record_task_loss(&mut graph, out, &batch.targets).map_err(diverged(x))?;
                let v = graph.value(loss).values()[0];
                (loss, composite_loss(&[v], 0.0, 0.0)?)
            }
            Mode::Intra => {
                let alpha_prime = strength.at(x);
                let mut outputs = Vec::with_capacity(config.passes);
                let mut losses: Vec<Var> = Vec::with_capacity(config.passes);
                for pass in 0..config.passes {
                    let masks = masks_for(pass)?;
                    let out = mlp
                        .forward(&mut graph, &bound, input, Some(&masks))
                        .map_err(diverged(x))?;
                    losses.push(
                        record_task_loss(&mut graph, out, &batch.targets).map_err(diverged(x))?,
                    );
                    outputs.push(out);
                }
                let intra = match intra_kind {
                    IntraLoss::XDivergence => record_x_divergence(&mut graph, &outputs),
                    IntraLoss::Js => record_js_divergence(&mut graph, &outputs),
                    IntraLoss::Mse => record_mse_intra(&mut graph, &outputs),
                }
                .map_err(diverged(x))?;
                let task_sum = graph.add_all(&losses)?;
                let task_mean = graph.scale(task_sum, 1.0 / config.passes as f64)?;
                let weighted = graph.scale(intra, alpha_prime)?;
                let root = graph.add(task_mean, weighted).map_err(diverged(x))?;
                let task_values: Vec<f64> =
                    losses.iter().map(|&l| graph.value(l).values()[0]).collect();
                let value =
                    composite_loss(&task_values, graph.value(intra).values()[0], alpha_prime)?;
                debug_assert!((value.total - graph.value(root).values()[0]).abs() <= 1e-12);
                (root, value)
            }
            Mode::SelfDistill(teacher) => {
                let teacher_probs = teacher_probabilities(&mlp, teacher, &batch.inputs)?;
                let masks = masks_for(0)?;
                let out = mlp
                    .forward(&mut graph, &bound, input, Some(&masks))
                    .map_err(diverged(x))?;
                let nll = record_task_loss(&mut graph, out, &batch.targets).map_err(diverged(x))?;
                let kd = record_kl_from_teacher(&mut graph, out, &teacher_probs)
                    .map_err(diverged(x))?;
                let w = config.self_distill_task_weight;
                let weighted = graph.scale(nll, w)?;
                let root = graph.add(weighted, kd).map_err(diverged(x))?;
                let nll_v = graph.value(nll).values()[0];
                let kd_v = graph.value(kd).values()[0];
                let value = LossValue {
                    total: graph.value(root).values()[0],
                    task_losses: vec![nll_v],
                    task_mean: nll_v,
                    intra: kd_v,
                    alpha_prime: 1.0,
                };
                (root, value)
            }
        };

        if !value.total.is_finite() {
            return Err(Error::Diverged {
                step: x,
                reason: format!("loss is {}", value.total),
            });
        }
        let grads = graph.backward(root).map_err(diverged(x))?;
        let flat = flatten_gradients(&grads, &bound, &params);
        optimizer.step(params.values_mut(), &flat);
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: x,
                reason: "parameters became non-finite".into(),
            });
        }

        metrics.steps.push(StepRecord {
            step: x,
            task_loss_mean: value.task_mean,
            intra_loss: value.intra,
            alpha_prime: value.alpha_prime,
            total: value.total,
        });
        metrics.wall_ms.push(started.elapsed().as_millis() as u64);

        let done = x + 1;
        if done % config.checkpoint_every == 0 || done == config.steps {
            checkpoint(done, &params, &mut metrics)?;
        }
    }

    Ok(TrainedModel {
        best,
        final_params: params,
        initial,
        metrics,
    })
}

fn teacher_probabilities(mlp: &Mlp, teacher: &ParameterVector, inputs: &Tensor) -> Result<Tensor> {
    let lp = mlp.predict(teacher, inputs)?;
    Tensor::new(
        lp.shape().to_vec(),
        lp.values().iter().map(|v| v.exp()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_clusters, teacher_regression, ClusterSpec, RegressionSpec};

    fn data() -> TaskData {
        gaussian_clusters(&ClusterSpec {
            train_samples: 120,
            valid_samples: 60,
            dim: 4,
            classes: 3,
            margin: 2.5,
            label_noise: 0.0,
            clusters_per_class: 1,
            seed: 1,
        })
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            model: MlpConfig {
                input_dim: 4,
                hidden_dims: vec![8],
                output_dim: 3,
                task: Task::Classification,
                dropout: 0.2,
            },
            passes: 2,
            strength: StrengthConfig {
                alpha: 5.0,
                p: 5.0,
                q: 10.0,
                adaptive: true,
            },
            intra_loss: None,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate: 0.1,
                weight_decay: 0.0,
            },
            steps: 60,
            batch_size: 16,
            seeds: Seeds::all(3),
            checkpoint_every: 20,
            shared_masks: false,
            self_distill_task_weight: 1.0,
            keep_snapshots: false,
        }
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let mut c = config();
        c.optimizer.learning_rate = 0.0;
        let out = train_standard(&c, &data()).unwrap();
        assert_eq!(out.final_params, out.initial);
    }

    #[test]
    fn standard_is_deterministic() {
        let a = train_standard(&config(), &data()).unwrap();
        let b = train_standard(&config(), &data()).unwrap();
        assert!(a.metrics.trajectory_eq(&b.metrics));
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn checkpoints_increase_and_best_is_minimum() {
        let out = train_intra_distill(&config(), &data()).unwrap();
        let steps: Vec<usize> = out.metrics.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 20, 40, 60]);
        let min = out
            .metrics
            .checkpoints
            .iter()
            .map(|c| c.valid.loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.metrics.best_checkpoint().valid.loss, min);
        let best_eval = evaluate(&Mlp::new(config().model).unwrap(), &out.best, &data().valid)
            .unwrap();
        assert_eq!(best_eval, out.metrics.best_checkpoint().valid);
    }

    #[test]
    fn logged_alpha_matches_schedule() {
        let c = config();
        let out = train_intra_distill(&c, &data()).unwrap();
        let s = AlphaSchedule::new(5.0, 5.0, 10.0, c.steps).unwrap();
        for r in &out.metrics.steps {
            assert_eq!(r.alpha_prime, s.alpha_at(r.step));
            assert!((r.total - (r.task_loss_mean + r.alpha_prime * r.intra_loss)).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_dropout_gives_zero_intra_loss() {
        let mut c = config();
        c.model.dropout = 0.0;
        c.passes = 3;
        let out = train_intra_distill(&c, &data()).unwrap();
        assert!(out.metrics.steps.iter().all(|r| r.intra_loss.abs() < 1e-10));
    }

    #[test]
    fn single_pass_intra_rejected() {
        let mut c = config();
        c.passes = 1;
        assert!(matches!(
            train_intra_distill(&c, &data()),
            Err(Error::TrainConfig(_))
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let mut c = config();
        c.optimizer.learning_rate = 1e200;
        match train_standard(&c, &data()) {
            Err(Error::Diverged { step, .. }) => assert!(step < c.steps),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn teacher_shape_mismatch() {
        let c = config();
        let wrong = ParameterVector::from_segments(vec![("w".into(), Tensor::vector(vec![0.0]))]);
        assert!(train_self_distill(&c, &data(), &wrong).is_err());
    }

    #[test]
    fn self_distill_is_deterministic() {
        let c = config();
        let teacher = train_standard(&c, &data()).unwrap().best;
        let a = train_self_distill(&c, &data(), &teacher).unwrap();
        let b = train_self_distill(&c, &data(), &teacher).unwrap();
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn uniform_teacher_pulls_student_to_uniform() {
        let mut c = config();
        c.self_distill_task_weight = 0.0;
        c.steps = 400;
        c.optimizer.learning_rate = 0.5;
        let d = data();
        let teacher = Mlp::new(c.model.clone())
            .unwrap()
            .init(&mut RngStream::new(0, 0))
            .zeros_like();
        let mlp = Mlp::new(c.model.clone()).unwrap();
        let before = train_standard(&TrainConfig { steps: 1, ..c.clone() }, &d).unwrap();
        let student = train_self_distill(&c, &d, &teacher).unwrap();
        let uniform = 3f64.ln();
        let gap = |p: &ParameterVector| (evaluate(&mlp, p, &d.valid).unwrap().loss - uniform).abs();
        assert!(gap(&student.final_params) < 0.01, "{}", gap(&student.final_params));
        assert!(gap(&student.final_params) < gap(&before.initial));
    }

    #[test]
    fn regression_intra_uses_mse() {
        let d = teacher_regression(&RegressionSpec {
            train_samples: 64,
            valid_samples: 32,
            dim: 3,
            teacher_hidden: 5,
            target_noise: 0.05,
            seed: 2,
        })
        .unwrap();
        let mut c = config();
        c.model = MlpConfig {
            input_dim: 3,
            hidden_dims: vec![8],
            output_dim: 1,
            task: Task::Regression,
            dropout: 0.1,
        };
        c.optimizer.learning_rate = 0.05;
        let out = train_intra_distill(&c, &d).unwrap();
        assert!(out.metrics.steps.iter().any(|r| r.intra_loss > 0.0));
        c.intra_loss = Some(IntraLoss::XDivergence);
        assert!(train_intra_distill(&c, &d).is_err());
    }

    #[test]
    fn evaluation_of_zero_model_is_uniform() {
        let mlp = Mlp::new(config().model).unwrap();
        let zero = mlp.init(&mut RngStream::new(0, 0)).zeros_like();
        let e = evaluate(&mlp, &zero, &data().valid).unwrap();
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(e, evaluate(&mlp, &zero, &data().valid).unwrap());
    }
}
