//! MLP networks with `M` input slots and `M` output heads.
//!
//! All architectures share one parameter layout convention: hidden layers
//! `hidden{l}.weight` (`fan_in x width`) and `hidden{l}.bias`, followed by
//! `output.weight` and `output.bias`. The output layer of the multi-head
//! architectures produces `M * output_dim` values that are split into heads,
//! head `m` owning columns `m * output_dim .. (m + 1) * output_dim`.
//! Deep ensembles prefix every name with `member{m}.`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Concatenated inputs, one shared body, `M` heads.
    Mimo,
    /// One shared input, one shared body, `M` heads.
    NaiveMultihead,
    /// Plain network, `M = 1`.
    Standard,
    /// `M` independent networks, member `m` reading input slot `m`.
    DeepEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub ensemble_size: usize,
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub task: Task,
    pub architecture: Architecture,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid network config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("expected {expected} input tensor(s), got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input batch sizes differ: {0:?}")]
    BatchMismatch(Vec<usize>),
    #[error("input slot {slot} has {got} features, network expects {expected}")]
    FeatureDim { slot: usize, expected: usize, got: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field, reason: &str| {
            Err(ModelError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.ensemble_size == 0 {
            return invalid("ensemble_size", "must be at least 1");
        }
        if self.architecture == Architecture::Standard && self.ensemble_size != 1 {
            return invalid("ensemble_size", "standard architecture requires ensemble_size = 1");
        }
        if self.input_dim == 0 {
            return invalid("input_dim", "must be positive");
        }
        if self.output_dim == 0 {
            return invalid("output_dim", "must be positive");
        }
        if self.hidden_widths.contains(&0) {
            return invalid("hidden_widths", "widths must be positive");
        }
        if self.task == Task::Classification && self.output_dim < 2 {
            return invalid("output_dim", "classification needs at least 2 classes");
        }
        Ok(())
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size
    }

    /// Input slots the first layer reads in one forward pass.
    fn first_layer_inputs(&self) -> usize {
        match self.architecture {
            Architecture::Mimo => self.ensemble_size * self.input_dim,
            _ => self.input_dim,
        }
    }

    fn head_outputs(&self) -> usize {
        match self.architecture {
            Architecture::DeepEnsemble => self.output_dim,
            _ => self.ensemble_size * self.output_dim,
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mlp = |prefix: &str| {
            let mut shapes = Vec::new();
            let mut fan_in = self.first_layer_inputs();
            for (l, &w) in self.hidden_widths.iter().enumerate() {
                shapes.push((format!("{prefix}hidden{l}.weight"), vec![fan_in, w]));
                shapes.push((format!("{prefix}hidden{l}.bias"), vec![w]));
                fan_in = w;
            }
            shapes.push((format!("{prefix}output.weight"), vec![fan_in, self.head_outputs()]));
            shapes.push((format!("{prefix}output.bias"), vec![self.head_outputs()]));
            shapes
        };
        match self.architecture {
            Architecture::DeepEnsemble => (0..self.ensemble_size)
                .flat_map(|m| mlp(&format!("member{m}.")))
                .collect(),
            _ => mlp(""),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn is_weight(&self) -> bool {
        self.name.ends_with(".weight")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<NamedTensor>,
}

/// Pre-activations of one hidden layer, `batch x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// Ensemble member for deep ensembles, `None` for shared-body networks.
    pub member: Option<usize>,
    pub layer: usize,
    pub values: Tensor,
}

/// Pre-activation of every hidden unit for every evaluated input tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layers: Vec<LayerActivations>,
}

impl ActivationRecord {
    pub fn unit_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.cols()).sum()
    }

    pub fn examples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.values.rows())
    }

    /// `(layer, unit)` coordinates in the order used by [`Self::unit_values`].
    pub fn unit_labels(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| (0..l.values.cols()).map(move |u| (l.layer, u)))
            .collect()
    }

    /// Values of unit `index` across examples.
    pub fn unit_values(&self, mut index: usize) -> Vec<f64> {
        for l in &self.layers {
            let w = l.values.cols();
            if index < w {
                return (0..l.values.rows()).map(|r| l.values.get(r, index)).collect();
            }
            index -= w;
        }
        panic!("unit index out of range");
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Raw head outputs (logits or regression means), one `batch x output_dim` node per head.
    pub heads: Vec<NodeId>,
    pub preactivations: Vec<(Option<usize>, usize, NodeId)>,
}

fn he_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in = shape[0] as f64;
    let scale = (2.0 / fan_in).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

fn init_mlp(shapes: &[(String, Vec<usize>)], seed: u64) -> Vec<NamedTensor> {
    let mut rng = rng_from_seed(seed);
    shapes
        .iter()
        .map(|(name, shape)| {
            let tensor = if name.ends_with(".weight") {
                he_init(shape, &mut rng)
            } else {
                Tensor::zeros(shape)
            };
            NamedTensor {
                name: name.clone(),
                tensor,
            }
        })
        .collect()
}

/// Seed used to initialise deep-ensemble member `m`.
pub fn member_seed(init_seed: u64, m: usize) -> u64 {
    derive_seed(init_seed, m as u64)
}

/// Builds a network with He-initialised weights and zero biases.
pub fn build_network(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let shapes = config.parameter_shapes();
    let params = match config.architecture {
        Architecture::DeepEnsemble => {
            let per_member = shapes.len() / config.ensemble_size;
            shapes
                .chunks(per_member)
                .enumerate()
                .flat_map(|(m, chunk)| init_mlp(chunk, member_seed(config.init_seed, m)))
                .collect()
        }
        _ => init_mlp(&shapes, config.init_seed),
    };
    Ok(Network {
        config: config.clone(),
        params,
    })
}

/// Arithmetic mean of per-example predictive distributions.
pub fn ensemble_predict(members: &[Tensor]) -> Result<Tensor> {
    let first = members
        .first()
        .ok_or_else(|| ModelError::Unsupported("ensemble_predict needs at least one member".into()))?;
    if let Some(bad) = members.iter().find(|t| t.shape() != first.shape()) {
        return Err(TensorError::ShapeMismatch {
            op: "ensemble_predict",
            shapes: vec![first.shape().to_vec(), bad.shape().to_vec()],
        }
        .into());
    }
    let n = members.len() as f64;
    let mut data = vec![0.0; first.len()];
    for t in members {
        for (acc, v) in data.iter_mut().zip(t.data()) {
            *acc += v;
        }
    }
    for v in &mut data {
        *v /= n;
    }
    Ok(Tensor::new(first.shape().to_vec(), data)?)
}

impl Network {
    /// Assembles a network from explicit parameters; names and shapes must
    /// match what `config` implies.
    pub fn from_parameters(config: NetworkConfig, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(ModelError::Unsupported(format!(
                "config implies {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(ModelError::Unsupported(format!(
                    "parameter {} with shape {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn ensemble_size(&self) -> usize {
        self.config.ensemble_size
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn parameters(&self) -> &[NamedTensor] {
        &self.params
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn parameter_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.tensor.squared_norm()).sum()
    }

    /// Number of input tensors [`Self::forward_mimo`] expects.
    pub fn input_slots(&self) -> usize {
        match self.config.architecture {
            Architecture::Mimo | Architecture::DeepEnsemble => self.config.ensemble_size,
            Architecture::NaiveMultihead | Architecture::Standard => 1,
        }
    }

    fn check_inputs(&self, shapes: &[Vec<usize>]) -> Result<()> {
        let slots = self.input_slots();
        let ok_count = shapes.len() == slots
            || (self.config.architecture == Architecture::NaiveMultihead && shapes.len() == self.config.ensemble_size);
        if !ok_count {
            return Err(ModelError::InputCount {
                expected: slots,
                got: shapes.len(),
            });
        }
        for (slot, s) in shapes.iter().enumerate() {
            if s.len() != 2 || s[1] != self.config.input_dim {
                return Err(ModelError::FeatureDim {
                    slot,
                    expected: self.config.input_dim,
                    got: *s.last().unwrap_or(&0),
                });
            }
        }
        let batches: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        if batches.windows(2).any(|w| w[0] != w[1]) {
            return Err(ModelError::BatchMismatch(batches));
        }
        Ok(())
    }

    /// Records the forward pass on `graph`. `params` are nodes for
    /// [`Self::parameters`] in order; `inputs` are `batch x input_dim` nodes,
    /// one per slot (a naive multihead network reads only the first).
    pub fn forward_graph(&self, graph: &mut Graph, params: &[NodeId], inputs: &[NodeId]) -> Result<ForwardNodes> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| graph.value(i).shape().to_vec()).collect();
        self.check_inputs(&shapes)?;
        let layers = self.config.hidden_widths.len();
        let per_member = 2 * (layers + 1);
        let body = |graph: &mut Graph, p: &[NodeId], x: NodeId, member: Option<usize>, pre: &mut Vec<_>| -> Result<NodeId> {
            let mut h = x;
            for l in 0..layers {
                let z = graph.matmul(h, p[2 * l])?;
                let z = graph.add(z, p[2 * l + 1])?;
                pre.push((member, l, z));
                h = graph.relu(z)?;
            }
            let out = graph.matmul(h, p[2 * layers])?;
            Ok(graph.add(out, p[2 * layers + 1])?)
        };
        let mut preactivations = Vec::new();
        let out_dim = self.config.output_dim;
        let heads = match self.config.architecture {
            Architecture::DeepEnsemble => (0..self.config.ensemble_size)
                .map(|m| {
                    let p = &params[m * per_member..(m + 1) * per_member];
                    body(graph, p, inputs[m], Some(m), &mut preactivations)
                })
                .collect::<Result<Vec<_>>>()?,
            arch => {
                let x = if arch == Architecture::Mimo && inputs.len() > 1 {
                    graph.concat(inputs)?
                } else {
                    inputs[0]
                };
                let out = body(graph, params, x, None, &mut preactivations)?;
                if self.config.ensemble_size == 1 {
                    vec![out]
                } else {
                    (0..self.config.ensemble_size)
                        .map(|m| graph.slice(out, m * out_dim, out_dim))
                        .collect::<std::result::Result<Vec<_>, _>>()?
                }
            }
        };
        Ok(ForwardNodes { heads, preactivations })
    }

    fn constant_forward(&self, inputs: &[Tensor]) -> Result<(Graph, ForwardNodes)> {
        let mut graph = Graph::new();
        let params: Vec<NodeId> = self.params.iter().map(|p| graph.constant(p.tensor.clone())).collect();
        let inputs: Vec<NodeId> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
        let nodes = self.forward_graph(&mut graph, &params, &inputs)?;
        Ok((graph, nodes))
    }

    /// Per-head predictive distributions: softmax probabilities for
    /// classification, the raw mean for regression.
    pub fn forward_mimo(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (mut graph, nodes) = self.constant_forward(inputs)?;
        nodes
            .heads
            .iter()
            .map(|&h| match self.config.task {
                Task::Classification => {
                    let p = graph.softmax(h)?;
                    Ok(graph.value(p).clone())
                }
                Task::Regression => Ok(graph.value(h).clone()),
            })
            .collect()
    }

    /// Every input slot receives `x`.
    pub fn forward_tiled(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let inputs = vec![x.clone(); self.input_slots()];
        self.forward_mimo(&inputs)
    }

    pub fn record_preactivations(&self, inputs: &[Tensor]) -> Result<ActivationRecord> {
        let (graph, nodes) = self.constant_forward(inputs)?;
        Ok(ActivationRecord {
            layers: nodes
                .preactivations
                .iter()
                .map(|&(member, layer, id)| LayerActivations {
                    member,
                    layer,
                    values: graph.value(id).clone(),
                })
                .collect(),
        })
    }
}
