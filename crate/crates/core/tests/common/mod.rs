//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use intradistill::autodiff::{DropoutMask, Graph, RngStream, Tensor};
use intradistill::data::{gaussian_clusters, Batch, ClusterSpec};
use intradistill::model::{flatten_gradients, Mlp, MlpConfig, ParameterSubset, ParameterVector, Task};
use intradistill::objective::{
    record_js_divergence, record_mse_intra, record_task_loss, record_x_divergence,
    DistributionBatch, Targets,
};
use intradistill::sensitivity::{exact_sensitivity, loss_gradient};
use intradistill::util::median;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};

/// Random categorical batch with Dirichlet(concentration) rows.
pub fn dirichlet_batch(
    rng: &mut ChaCha8Rng,
    k: usize,
    rows: usize,
    dims: usize,
    concentration: f64,
) -> DistributionBatch {
    let dir = Dirichlet::new(&vec![concentration; dims]).unwrap();
    let mut probs = Vec::with_capacity(k * rows * dims);
    for _ in 0..k * rows {
        probs.extend(dir.sample(rng));
    }
    DistributionBatch::new(k, rows, dims, probs).unwrap()
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consistency {
    XDivergence,
    Js,
    Mse,
}

/// A random small MLP with fixed inputs, targets and dropout masks so the
/// K-pass objective is a deterministic function of the parameters.
pub struct GradProblem {
    pub mlp: Mlp,
    pub params: ParameterVector,
    pub inputs: Tensor,
    pub targets: Targets,
    pub masks: Vec<Vec<DropoutMask>>,
    pub alpha: f64,
    pub consistency: Consistency,
}

impl GradProblem {
    pub fn random(seed: u64, consistency: Consistency) -> Self {
        let mut rng = RngStream::new(seed, 77);
        let task = if consistency == Consistency::Mse {
            Task::Regression
        } else {
            Task::Classification
        };
        let input_dim = 1 + rng.below(8);
        let depth = 1 + rng.below(2);
        let hidden: Vec<usize> = (0..depth).map(|_| 1 + rng.below(16)).collect();
        let output_dim = match task {
            Task::Classification => 2 + rng.below(4),
            Task::Regression => 1 + rng.below(3),
        };
        let config = MlpConfig {
            input_dim,
            hidden_dims: hidden,
            output_dim,
            task,
            dropout: 0.25,
        };
        let mlp = Mlp::new(config).unwrap();
        let mut params = mlp.init(&mut rng);
        // Nonzero biases so that no pre-activation is structurally zero.
        for (i, v) in params.values_mut().iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.1 * rng.normal() + 1e-3 * i as f64;
            }
        }
        let rows = 4;
        let inputs =
            Tensor::matrix(rows, input_dim, (0..rows * input_dim).map(|_| rng.normal()).collect())
                .unwrap();
        let targets = match task {
            Task::Classification => Targets::Classes {
                labels: (0..rows).map(|_| rng.below(output_dim)).collect(),
                classes: output_dim,
            },
            Task::Regression => Targets::Values {
                values: (0..rows * output_dim).map(|_| rng.normal()).collect(),
                width: output_dim,
            },
        };
        let masks = (0..2)
            .map(|_| mlp.draw_masks(&mut rng, rows).unwrap())
            .collect();
        Self {
            mlp,
            params,
            inputs,
            targets,
            masks,
            alpha: 0.5 + 2.5 * rng.uniform(),
            consistency,
        }
    }

    /// Objective value and analytic gradient at `params`.
    pub fn evaluate(&self, params: &ParameterVector) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let bound = self.mlp.bind(&mut g, params, true).unwrap();
        let x = g.constant(self.inputs.clone());
        let mut outs = Vec::new();
        let mut losses = Vec::new();
        for m in &self.masks {
            let out = self.mlp.forward(&mut g, &bound, x, Some(m)).unwrap();
            losses.push(record_task_loss(&mut g, out, &self.targets).unwrap());
            outs.push(out);
        }
        let intra = match self.consistency {
            Consistency::XDivergence => record_x_divergence(&mut g, &outs),
            Consistency::Js => record_js_divergence(&mut g, &outs),
            Consistency::Mse => record_mse_intra(&mut g, &outs),
        }
        .unwrap();
        let sum = g.add_all(&losses).unwrap();
        let mean = g.scale(sum, 0.5).unwrap();
        let weighted = g.scale(intra, self.alpha).unwrap();
        let root = g.add(mean, weighted).unwrap();
        let value = g.value(root).item().unwrap();
        let grads = g.backward(root).unwrap();
        (value, flatten_gradients(&grads, &bound, params))
    }

    /// Smallest |pre-activation| over all hidden units and passes.
    pub fn min_abs_preactivation(&self) -> f64 {
        let cfg = self.mlp.config();
        let layers = cfg.layer_dims();
        let rows = self.inputs.shape()[0];
        let mut min = f64::INFINITY;
        for m in &self.masks {
            let mut h = self.inputs.values().to_vec();
            for (l, &(fan_in, fan_out)) in layers.iter().enumerate().take(layers.len() - 1) {
                let w = self.params.segment_values(2 * l);
                let b = self.params.segment_values(2 * l + 1);
                let mask = m[l].to_tensor();
                let mut next = vec![0.0; rows * fan_out];
                for r in 0..rows {
                    for j in 0..fan_out {
                        let mut z = b[j];
                        for i in 0..fan_in {
                            z += h[r * fan_in + i] * w[i * fan_out + j];
                        }
                        min = min.min(z.abs());
                        next[r * fan_out + j] = z.max(0.0) * mask.values()[r * fan_out + j];
                    }
                }
                h = next;
            }
        }
        min
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;
/// Models with a hidden pre-activation this close to the ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub entries: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub redraws: usize,
}

/// Compares every analytic gradient entry with a central difference.
pub fn grad_check(seed: u64, consistency: Consistency) -> GradCheck {
    let mut redraws = 0;
    let mut problem = GradProblem::random(seed, consistency);
    while problem.min_abs_preactivation() < KINK_MARGIN {
        redraws += 1;
        problem = GradProblem::random(seed.wrapping_mul(1_000_003).wrapping_add(redraws as u64), consistency);
    }
    let (_, analytic) = problem.evaluate(&problem.params);
    let mut failures = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for i in 0..problem.params.len() {
        let mut plus = problem.params.clone();
        plus.values_mut()[i] += FD_STEP;
        let mut minus = problem.params.clone();
        minus.values_mut()[i] -= FD_STEP;
        let numeric = (problem.evaluate(&plus).0 - problem.evaluate(&minus).0) / (2.0 * FD_STEP);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        worst_abs = worst_abs.max(diff);
        if diff > FD_ABS_FLOOR {
            worst_rel = worst_rel.max(diff / scale);
            if diff > FD_REL_TOL * scale {
                failures += 1;
            }
        }
    }
    GradCheck {
        entries: problem.params.len(),
        failures,
        worst_rel,
        worst_abs,
        redraws,
    }
}

pub const SENSITIVITY_EPSILONS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Median over `subsets` random singletons of `|exact − approx| / approx`
/// after shrinking the chosen parameter by each ε.
pub fn sensitivity_gaps(seed: u64, subsets: usize) -> [f64; 3] {
    let config = MlpConfig {
        input_dim: 4,
        hidden_dims: vec![12],
        output_dim: 3,
        task: Task::Classification,
        dropout: 0.1,
    };
    let mlp = Mlp::new(config).unwrap();
    let params = mlp.init(&mut RngStream::new(seed, 5));
    let data = gaussian_clusters(&ClusterSpec {
        train_samples: 64,
        valid_samples: 8,
        dim: 4,
        classes: 3,
        margin: 1.5,
        label_noise: 0.0,
        clusters_per_class: 1,
        seed,
    })
    .unwrap();
    let batches: Vec<Batch> = data.train.chunks(16);
    let (_, base_grad) = loss_gradient(&mlp, &params, &batches).unwrap();
    let candidates: Vec<usize> = (0..params.len())
        .filter(|&i| params.values()[i] != 0.0 && base_grad[i].abs() > 1e-6)
        .collect();
    let mut rng = RngStream::new(seed, 6);
    let picks: Vec<usize> = (0..subsets)
        .map(|_| candidates[rng.below(candidates.len())])
        .collect();

    let mut out = [0.0; 3];
    for (slot, &eps) in SENSITIVITY_EPSILONS.iter().enumerate() {
        let gaps: Vec<f64> = picks
            .iter()
            .map(|&i| {
                let mut scaled = params.clone();
                scaled.values_mut()[i] *= eps;
                let subset = ParameterSubset::singleton(i, params.len()).unwrap();
                let exact = exact_sensitivity(&mlp, &scaled, &subset, &batches).unwrap();
                let (_, grad) = loss_gradient(&mlp, &scaled, &batches).unwrap();
                let approx = (scaled.values()[i] * grad[i]).abs();
                (exact - approx).abs() / approx
            })
            .collect();
        out[slot] = median(&gaps);
    }
    out
}
