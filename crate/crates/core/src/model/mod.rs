//! Small MLPs with a flat, segment-addressed parameter view.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::{draw_mask, DropoutMask, Graph, RngStream, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{metadata_path, read_checkpoint, write_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub task: Task,
    #[serde(default)]
    pub dropout: f64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::ModelConfig("all dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::DropoutRate(self.dropout));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// Location of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All model parameters as one flat buffer split into named segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn from_segments(parts: Vec<(String, Tensor)>) -> Self {
        let mut segments = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for (name, tensor) in parts {
            segments.push(Segment {
                name,
                shape: tensor.shape().to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(tensor.values());
        }
        Self { segments, values }
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                what: "parameter values",
                left: self.values.len(),
                right: values.len(),
            });
        }
        Ok(Self {
            segments: self.segments.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, i: usize) -> &[f64] {
        let s = &self.segments[i];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn segment_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.segments[i].shape.clone(), self.segment_values(i).to_vec())
            .expect("segment shape matches its slice")
    }

    /// `(segment index, offset within segment)` of a flat index.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        if flat >= self.values.len() {
            return None;
        }
        let seg = self
            .segments
            .partition_point(|s| s.offset + s.len() <= flat);
        Some((seg, flat - self.segments[seg].offset))
    }

    pub fn flat_index(&self, segment: usize, offset: usize) -> Option<usize> {
        let s = self.segments.get(segment)?;
        (offset < s.len()).then_some(s.offset + offset)
    }

    pub fn layer_name(&self, flat: usize) -> Option<&str> {
        self.locate(flat).map(|(s, _)| self.segments[s].name.as_str())
    }

    /// Copy with the listed entries set to zero.
    pub fn zero_out(&self, subset: &ParameterSubset) -> Result<Self> {
        let mut out = self.clone();
        for &i in subset.indices() {
            *out.values
                .get_mut(i)
                .ok_or(Error::IndexOutOfRange {
                    index: i,
                    total: self.values.len(),
                })? = 0.0;
        }
        Ok(out)
    }
}

/// Sorted, duplicate-free flat indices into a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSubset {
    indices: Vec<usize>,
}

impl ParameterSubset {
    pub fn new(mut indices: Vec<usize>, total: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.last().filter(|&&i| i >= total) {
            return Err(Error::IndexOutOfRange { index: bad, total });
        }
        Ok(Self { indices })
    }

    pub fn all(total: usize) -> Self {
        Self {
            indices: (0..total).collect(),
        }
    }

    pub fn singleton(index: usize, total: usize) -> Result<Self> {
        Self::new(vec![index], total)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Graph handles for every parameter segment, in segment order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Validated MLP architecture. Holds no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn hidden_layers(&self) -> usize {
        self.config.hidden_dims.len()
    }

    /// Uniform fan-based weights, zero biases.
    pub fn init(&self, rng: &mut RngStream) -> ParameterVector {
        let mut parts = Vec::new();
        for (layer, (fan_in, fan_out)) in self.config.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            parts.push((
                format!("layer{layer}.weight"),
                Tensor::matrix(fan_in, fan_out, w).expect("sized above"),
            ));
            parts.push((format!("layer{layer}.bias"), Tensor::zeros(&[fan_out])));
        }
        ParameterVector::from_segments(parts)
    }

    fn check_layout(&self, params: &ParameterVector) -> Result<()> {
        let expected = self.config.parameter_count();
        if params.len() != expected || params.segments().len() != 2 * self.config.layer_dims().len()
        {
            return Err(Error::LengthMismatch {
                what: "parameter vector vs model config",
                left: expected,
                right: params.len(),
            });
        }
        Ok(())
    }

    /// Registers parameters on `graph`; `trainable` decides whether they get gradients.
    pub fn bind(
        &self,
        graph: &mut Graph,
        params: &ParameterVector,
        trainable: bool,
    ) -> Result<BoundParams> {
        self.check_layout(params)?;
        let vars = (0..params.segments().len())
            .map(|i| {
                let t = params.segment_tensor(i);
                if trainable {
                    graph.param(t)
                } else {
                    graph.constant(t)
                }
            })
            .collect();
        Ok(BoundParams { vars })
    }

    /// Draws one mask per hidden layer for a batch of `rows`.
    pub fn draw_masks(&self, rng: &mut RngStream, rows: usize) -> Result<Vec<DropoutMask>> {
        self.config
            .hidden_dims
            .iter()
            .map(|&h| draw_mask(rng, &[rows, h], self.config.dropout))
            .collect()
    }

    /// Classification yields per-row log-probabilities, regression raw outputs.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: Var,
        masks: Option<&[DropoutMask]>,
    ) -> Result<Var> {
        let (_, width) = graph.value(input).dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "forward",
            lhs: graph.value(input).shape().to_vec(),
            rhs: vec![self.config.input_dim],
        })?;
        if width != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: graph.value(input).shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        if let Some(m) = masks {
            if m.len() != self.hidden_layers() {
                return Err(Error::LengthMismatch {
                    what: "dropout masks vs hidden layers",
                    left: self.hidden_layers(),
                    right: m.len(),
                });
            }
        }
        let layers = self.config.layer_dims().len();
        let mut h = input;
        for layer in 0..layers {
            let w = bound.vars[2 * layer];
            let b = bound.vars[2 * layer + 1];
            let z = graph.matmul(h, w)?;
            h = graph.add_bias(z, b)?;
            if layer + 1 < layers {
                h = graph.relu(h)?;
                if let Some(masks) = masks {
                    let mask = graph.constant(masks[layer].to_tensor());
                    h = graph.mul(h, mask)?;
                }
            }
        }
        match self.config.task {
            Task::Classification => graph.log_softmax(h),
            Task::Regression => Ok(h),
        }
    }

    /// Evaluation-mode forward outside any caller-owned graph.
    pub fn predict(&self, params: &ParameterVector, inputs: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, params, false)?;
        let x = graph.constant(inputs.clone());
        let out = self.forward(&mut graph, &bound, x, None)?;
        Ok(graph.value(out).clone())
    }
}

/// Flattens per-segment gradients into a vector aligned with `params`.
pub fn flatten_gradients(
    grads: &crate::autodiff::Gradients,
    bound: &BoundParams,
    params: &ParameterVector,
) -> Vec<f64> {
    let mut flat = Vec::with_capacity(params.len());
    for (i, &v) in bound.vars.iter().enumerate() {
        match grads.get(v) {
            Some(g) => flat.extend_from_slice(g.values()),
            None => flat.extend(std::iter::repeat(0.0).take(params.segments()[i].len())),
        }
    }
    flat
}
