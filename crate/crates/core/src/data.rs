//! Synthetic datasets and minibatch sampling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngStream, Tensor};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpConfig, Task};
use crate::objective::Targets;

// Stream ids used by the generators. Distinct from the dropout domain.
const STREAM_CENTERS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALID: u64 = 3;
const STREAM_TEACHER: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.targets.rows()
    }
}

/// Row-major inputs with aligned targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, targets: Targets) -> Result<Self> {
        if dim == 0 || inputs.len() % dim != 0 || inputs.len() / dim != targets.rows() {
            return Err(Error::LengthMismatch {
                what: "dataset inputs vs targets",
                left: inputs.len() / dim.max(1),
                right: targets.rows(),
            });
        }
        Ok(Self {
            dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the listed rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            inputs.extend_from_slice(self.input_row(r));
        }
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
            Targets::Values { values, width } => Targets::Values {
                values: rows
                    .iter()
                    .flat_map(|&r| values[r * width..(r + 1) * width].iter().copied())
                    .collect(),
                width: *width,
            },
        };
        Batch {
            inputs: Tensor::matrix(rows.len(), self.dim, inputs).expect("gathered rows"),
            targets,
        }
    }

    pub fn full_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Consecutive batches of at most `size` rows, in dataset order.
    pub fn chunks(&self, size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// `count` batches of `size` rows drawn by cycling seeded permutations.
    pub fn sampled_batches(&self, count: usize, size: usize, seed: u64) -> Vec<Batch> {
        let mut sampler = BatchSampler::new(self.len(), size, RngStream::new(seed, 0));
        (0..count).map(|_| self.batch(&sampler.next_rows())).collect()
    }
}

/// Epoch-wise shuffled minibatch indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    size: usize,
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, size: usize, rng: RngStream) -> Self {
        Self {
            n,
            size: size.clamp(1, n.max(1)),
            rng,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// Next batch; the final short remainder of an epoch is skipped.
    pub fn next_rows(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order = self.rng.permutation(self.n);
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        rows
    }
}

/// Train and validation splits drawn from the same generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
}

/// Gaussian class clusters with centers at distance `margin` from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub train_samples: usize,
    pub valid_samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub margin: f64,
    /// Fraction of training labels replaced by a uniformly random class.
    #[serde(default)]
    pub label_noise: f64,
    /// Clusters sharing each label; above 1 the classes are not convex.
    #[serde(default = "one_cluster")]
    pub clusters_per_class: usize,
    pub seed: u64,
}

fn one_cluster() -> usize {
    1
}

/// Targets produced by a random ReLU teacher network plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub train_samples: usize,
    pub valid_samples: usize,
    pub dim: usize,
    pub teacher_hidden: usize,
    pub target_noise: f64,
    pub seed: u64,
}

pub fn gaussian_clusters(spec: &ClusterSpec) -> Result<TaskData> {
    if spec.dim == 0
        || spec.classes < 2
        || spec.clusters_per_class == 0
        || spec.train_samples == 0
        || spec.valid_samples == 0
    {
        return Err(Error::Config(
            "cluster task needs dim >= 1, classes >= 2, clusters_per_class >= 1 and nonempty splits"
                .into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::Config(format!(
            "label_noise {} outside [0, 1]",
            spec.label_noise
        )));
    }
    let mut rng = RngStream::new(spec.seed, STREAM_CENTERS);
    let clusters = spec.classes * spec.clusters_per_class;
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| spec.margin * x / norm).collect()
        })
        .collect();

    let split = |n: usize, stream: u64, noise: f64| -> Result<Dataset> {
        let mut rng = RngStream::new(spec.seed, stream);
        let mut inputs = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let cluster = i % clusters;
            let class = cluster % spec.classes;
            inputs.extend(centers[cluster].iter().map(|c| c + rng.normal()));
            let label = if noise > 0.0 && rng.uniform() < noise {
                rng.below(spec.classes)
            } else {
                class
            };
            labels.push(label);
        }
        Dataset::new(
            spec.dim,
            inputs,
            Targets::Classes {
                labels,
                classes: spec.classes,
            },
        )
    };
    Ok(TaskData {
        train: split(spec.train_samples, STREAM_TRAIN, spec.label_noise)?,
        valid: split(spec.valid_samples, STREAM_VALID, 0.0)?,
    })
}

pub fn teacher_regression(spec: &RegressionSpec) -> Result<TaskData> {
    if spec.dim == 0 || spec.teacher_hidden == 0 || spec.train_samples == 0 || spec.valid_samples == 0
    {
        return Err(Error::Config(
            "regression task needs dim, teacher_hidden and splits >= 1".into(),
        ));
    }
    let teacher = Mlp::new(MlpConfig {
        input_dim: spec.dim,
        hidden_dims: vec![spec.teacher_hidden],
        output_dim: 1,
        task: Task::Regression,
        dropout: 0.0,
    })?;
    let weights = teacher.init(&mut RngStream::new(spec.seed, STREAM_TEACHER));

    let split = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = RngStream::new(spec.seed, stream);
        let inputs: Vec<f64> = (0..n * spec.dim).map(|_| rng.normal()).collect();
        let x = Tensor::matrix(n, spec.dim, inputs.clone())?;
        let clean = teacher.predict(&weights, &x)?;
        let values = clean
            .values()
            .iter()
            .map(|y| y + spec.target_noise * rng.normal())
            .collect();
        Dataset::new(spec.dim, inputs, Targets::Values { values, width: 1 })
    };
    Ok(TaskData {
        train: split(spec.train_samples, STREAM_TRAIN)?,
        valid: split(spec.valid_samples, STREAM_VALID)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> ClusterSpec {
        ClusterSpec {
            train_samples: 40,
            valid_samples: 20,
            dim: 3,
            classes: 4,
            margin: 2.0,
            label_noise: 0.0,
            clusters_per_class: 1,
            seed: 5,
        }
    }

    #[test]
    fn clusters_are_balanced_and_deterministic() {
        let a = gaussian_clusters(&clusters()).unwrap();
        let b = gaussian_clusters(&clusters()).unwrap();
        assert_eq!(a, b);
        let Targets::Classes { labels, .. } = a.train.targets() else {
            panic!()
        };
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_ne!(a.train.input_row(0), a.valid.input_row(0));
    }

    #[test]
    fn regression_targets_have_one_column() {
        let d = teacher_regression(&RegressionSpec {
            train_samples: 10,
            valid_samples: 5,
            dim: 2,
            teacher_hidden: 4,
            target_noise: 0.1,
            seed: 1,
        })
        .unwrap();
        assert_eq!(d.train.len(), 10);
        assert_eq!(d.valid.task(), Task::Regression);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, RngStream::new(0, 0));
        let mut seen: Vec<usize> = s.next_rows();
        seen.extend(s.next_rows());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_gathers_rows() {
        let d = gaussian_clusters(&clusters()).unwrap().train;
        let b = d.batch(&[3, 1]);
        assert_eq!(b.inputs.row(0), d.input_row(3));
        assert_eq!(b.rows(), 2);
        assert_eq!(d.chunks(16).len(), 3);
    }
}
