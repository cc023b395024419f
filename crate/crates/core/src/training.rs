//! The multi-input multi-output loss, plain SGD, tiled evaluation and
//! checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, MimoBatch, MimoSampler, SamplingConfig};
use crate::model::{ensemble_predict, Architecture, ModelError, NamedTensor, Network, NetworkConfig, Task};
use crate::tensor::{gradient_check_tensors, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("non-finite loss in {}", match .head { Some(m) => format!("head {m}"), None => "shared body or regularizer".to_string() })]
    NonFiniteLoss { head: Option<usize> },
    #[error("training diverged at step {step} (last finite loss {last_finite_loss:?})")]
    Diverged { step: usize, last_finite_loss: Option<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// From `step` on, the learning rate is `learning_rate * multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub step: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Vec<ScheduleStep>,
    #[serde(default)]
    pub l2_coefficient: f64,
    #[serde(default)]
    pub l1_coefficient: f64,
    pub steps: usize,
    /// 0 disables trajectory snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl OptimizerConfig {
    /// Constant rate dropped by 10x at half and again at three quarters of `steps`.
    pub fn with_step_decay(learning_rate: f64, steps: usize) -> Self {
        let schedule = if steps >= 4 {
            vec![
                ScheduleStep {
                    step: steps / 2,
                    multiplier: 0.1,
                },
                ScheduleStep {
                    step: steps * 3 / 4,
                    multiplier: 0.01,
                },
            ]
        } else {
            Vec::new()
        };
        Self {
            learning_rate,
            schedule,
            l2_coefficient: 0.0,
            l1_coefficient: 0.0,
            steps,
            snapshot_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(TrainError::InvalidConfig { field, reason });
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        for (field, v) in [("l2_coefficient", self.l2_coefficient), ("l1_coefficient", self.l1_coefficient)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, format!("must be non-negative, got {v}"));
            }
        }
        if self.schedule.windows(2).any(|w| w[0].step >= w[1].step) {
            return bad("schedule", "steps must be strictly increasing".into());
        }
        if let Some(s) = self.schedule.iter().find(|s| !(s.multiplier > 0.0) || !s.multiplier.is_finite()) {
            return bad("schedule", format!("multiplier {} must be positive", s.multiplier));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let multiplier = self
            .schedule
            .iter()
            .take_while(|s| s.step <= step)
            .last()
            .map_or(1.0, |s| s.multiplier);
        self.learning_rate * multiplier
    }
}

/// Scalar loss node plus the per-head data terms that make it up.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub heads: Vec<NodeId>,
}

fn head_error(head: Option<usize>) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NumericOverflow { .. } => TrainError::NonFiniteLoss { head },
        other => TrainError::Tensor(other),
    }
}

/// Records the training loss: the sum over heads of each head's mean
/// negative log-likelihood (mean squared error for regression), plus
/// `l2 * |theta|^2 + l1 * |theta|_1`.
///
/// Head `m` is scored against label slot `m`; a naive multihead network sees
/// only slot 0 and scores every head against it.
pub fn compute_loss(
    graph: &mut Graph,
    net: &Network,
    params: &[NodeId],
    batch: &MimoBatch,
    l1: f64,
    l2: f64,
) -> Result<LossNodes> {
    let m_heads = net.ensemble_size();
    let naive = net.architecture() == Architecture::NaiveMultihead;
    let slots = if naive { 1 } else { net.input_slots() };
    if batch.inputs.len() < slots || (!naive && batch.labels.len() != m_heads) {
        return Err(ModelError::InputCount {
            expected: m_heads,
            got: batch.inputs.len(),
        }
        .into());
    }
    let inputs: Vec<NodeId> = batch.inputs[..slots].iter().map(|t| graph.constant(t.clone())).collect();
    let forward = net
        .forward_graph(graph, params, &inputs)
        .map_err(|e| match e {
            ModelError::Tensor(TensorError::NumericOverflow { .. }) => TrainError::NonFiniteLoss { head: None },
            other => other.into(),
        })?;
    let rows = batch.rows() as f64;

    let mut heads = Vec::with_capacity(m_heads);
    for (m, &out) in forward.heads.iter().enumerate() {
        let labels = graph.constant(batch.labels[if naive { 0 } else { m }].clone());
        let term = (|| -> std::result::Result<NodeId, TensorError> {
            match net.task() {
                Task::Classification => {
                    let log_p = graph.log_softmax(out)?;
                    let picked = graph.mul(log_p, labels)?;
                    let total = graph.sum(picked)?;
                    graph.scale(total, -1.0 / rows)
                }
                Task::Regression => {
                    let diff = graph.sub(out, labels)?;
                    let sq = graph.square(diff)?;
                    graph.mean(sq)
                }
            }
        })()
        .map_err(head_error(Some(m)))?;
        heads.push(term);
    }

    let mut total = heads[0];
    for &h in &heads[1..] {
        total = graph.add(total, h).map_err(head_error(None))?;
    }
    let reg = (|| -> std::result::Result<NodeId, TensorError> {
        let mut total = total;
        for &p in params {
            if l2 > 0.0 {
                let sq = graph.square(p)?;
                let s = graph.sum(sq)?;
                let s = graph.scale(s, l2)?;
                total = graph.add(total, s)?;
            }
            if l1 > 0.0 {
                let a = graph.abs(p)?;
                let s = graph.sum(a)?;
                let s = graph.scale(s, l1)?;
                total = graph.add(total, s)?;
            }
        }
        Ok(total)
    })()
    .map_err(head_error(None))?;
    Ok(LossNodes { total: reg, heads })
}

/// Per-head predictions on a fixed evaluation set at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    /// One row-major `rows x cols` matrix per head.
    pub heads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: usize,
    pub cols: usize,
    pub snapshots: Vec<Snapshot>,
}

impl TrajectoryLog {
    fn record(&mut self, step: usize, net: &Network, eval: &Dataset) -> Result<()> {
        let heads = net.forward_tiled(eval.features())?;
        self.rows = heads[0].rows();
        self.cols = heads[0].cols();
        self.snapshots.push(Snapshot {
            step,
            heads: heads.into_iter().map(Tensor::into_data).collect(),
        });
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.heads.len())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Loss before each update.
    pub loss_curve: Vec<f64>,
    pub trajectory: TrajectoryLog,
    /// Sampler stream position after the last batch.
    pub sampler_position: u128,
}

/// Largest relative gap between analytic and central-difference gradients
/// of the training loss at `net`'s current parameters.
pub fn check_loss_gradient(net: &Network, batch: &MimoBatch, l1: f64, l2: f64) -> Result<f64> {
    let point: Vec<Tensor> = net.parameters().iter().map(|p| p.tensor.clone()).collect();
    Ok(gradient_check_tensors(&point, |graph, ids| {
        compute_loss(graph, net, ids, batch, l1, l2)
            .map(|l| l.total)
            .map_err(|e| match e {
                TrainError::Tensor(t) => t,
                other => TensorError::Invalid(other.to_string()),
            })
    })?)
}

/// One SGD update in place: `theta -= lr * grad`.
pub fn sgd_step(net: &mut Network, batch: &MimoBatch, opt: &OptimizerConfig, lr: f64) -> Result<f64> {
    let mut graph = Graph::new();
    let params: Vec<NodeId> = net.parameters().iter().map(|p| graph.parameter(p.tensor.clone())).collect();
    let loss = compute_loss(&mut graph, net, &params, batch, opt.l1_coefficient, opt.l2_coefficient)?;
    let value = graph.value(loss.total).data()[0];
    let grads = graph.backpropagate(loss.total)?;
    for (p, id) in net.parameters_mut().iter_mut().zip(&params) {
        let g = grads.get(*id).expect("gradient for every parameter");
        for (w, d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(value)
}

/// Runs `opt.steps` SGD updates on batches drawn by `sampling`.
///
/// When `opt.snapshot_every > 0` and `snapshot_set` is given, per-head
/// predictions on it are recorded before training, every `snapshot_every`
/// updates and after the final update.
pub fn train(
    net: &Network,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    opt: &OptimizerConfig,
    snapshot_set: Option<&Dataset>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if sampling.ensemble_size != net.ensemble_size() {
        return Err(TrainError::Data(DataError::InvalidConfig {
            field: "ensemble_size",
            reason: format!(
                "sampler draws {} slots but the network has {} heads",
                sampling.ensemble_size,
                net.ensemble_size()
            ),
        }));
    }
    let mut sampler = MimoSampler::new(sampling.clone())?;
    let mut net = net.clone();
    let mut loss_curve = Vec::with_capacity(opt.steps);
    let mut trajectory = TrajectoryLog::default();
    let snapshots = snapshot_set.filter(|_| opt.snapshot_every > 0);
    if let Some(eval) = snapshots {
        trajectory.record(0, &net, eval)?;
    }
    for step in 0..opt.steps {
        let batch = sampler.sample(dataset)?;
        let lr = opt.learning_rate_at(step);
        let diverged = |_| TrainError::Diverged {
            step,
            last_finite_loss: loss_curve.last().copied(),
        };
        let loss = match sgd_step(&mut net, &batch, opt, lr) {
            Ok(v) => v,
            Err(TrainError::NonFiniteLoss { .. }) | Err(TrainError::Tensor(TensorError::NumericOverflow { .. })) => {
                return Err(diverged(()))
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || net.parameters().iter().any(|p| !p.tensor.is_finite()) {
            return Err(diverged(()));
        }
        loss_curve.push(loss);
        if let Some(eval) = snapshots {
            let done = step + 1;
            if done % opt.snapshot_every == 0 || done == opt.steps {
                trajectory.record(done, &net, eval)?;
            }
        }
    }
    Ok(TrainOutcome {
        network: net,
        loss_curve,
        trajectory,
        sampler_position: sampler.stream_position(),
    })
}

/// Tiled evaluation: every head sees the same input; the ensemble is their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub heads: Vec<Tensor>,
    pub ensemble: Tensor,
}

pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<Evaluation> {
    let heads = net.forward_tiled(dataset.features())?;
    let ensemble = ensemble_predict(&heads)?;
    Ok(Evaluation { heads, ensemble })
}

pub const CHECKPOINT_MAGIC: [u8; 5] = *b"MIMO\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensors do not match the embedded network config: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where the sampler stream stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    /// 128-bit word position, decimal.
    pub word_position: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
    dtype: String,
    step: u64,
    #[serde(default)]
    rng: Option<RngDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub network: Network,
    pub step: u64,
    pub rng: Option<RngDescriptor>,
}

impl Checkpoint {
    pub fn new(network: Network, step: u64, rng: Option<RngDescriptor>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            network,
            step,
            rng,
        }
    }

    /// Magic, little-endian `u32` header length, JSON header, then every
    /// tensor as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: self.version,
            network: self.network.config().clone(),
            tensors: self
                .network
                .parameters()
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            dtype: "f64".into(),
            step: self.step,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + json.len() + 8 * self.network.parameter_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.network.parameters() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[CHECKPOINT_MAGIC.len()..];
        if rest.len() < 4 {
            return Err(CheckpointError::Truncated("missing header length".into()));
        }
        let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(CheckpointError::Truncated(format!(
                "header claims {header_len} bytes, {} available",
                rest.len()
            )));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..header_len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: header.version });
        }
        if header.dtype != "f64" {
            return Err(CheckpointError::Header(format!("unsupported dtype {:?}", header.dtype)));
        }
        let expected = header.network.parameter_shapes();
        let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != listed {
            return Err(CheckpointError::ShapeMismatch(format!(
                "header lists {listed:?}, config implies {expected:?}"
            )));
        }
        let payload = &rest[header_len..];
        let values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() < values * 8 {
            return Err(CheckpointError::Truncated(format!(
                "header describes {values} values, payload holds {}",
                payload.len() / 8
            )));
        }
        if payload.len() > values * 8 {
            return Err(CheckpointError::TrailingBytes(payload.len() - values * 8));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params = header
            .tensors
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                let data: Vec<f64> = floats.by_ref().take(n).collect();
                Tensor::new(t.shape.clone(), data).map(|tensor| NamedTensor {
                    name: t.name.clone(),
                    tensor,
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let network =
            Network::from_parameters(header.network, params).map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        Ok(Self {
            version: header.version,
            network,
            step: header.step,
            rng: header.rng,
        })
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> std::result::Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(&checkpoint.to_bytes()).map_err(io)?;
    file.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::model::{build_network, Architecture};

    fn blobs_net(m: usize, arch: Architecture, hidden: Vec<usize>) -> Network {
        build_network(&NetworkConfig {
            ensemble_size: m,
            input_dim: 2,
            hidden_widths: hidden,
            output_dim: 4,
            task: Task::Classification,
            architecture: arch,
            init_seed: 5,
        })
        .unwrap()
    }

    fn sampling(m: usize) -> SamplingConfig {
        SamplingConfig {
            batch_size: 16,
            ensemble_size: m,
            input_repetition_probability: 0.0,
            batch_repetitions: 1,
            seed: 9,
        }
    }

    fn uniform_batch(m: usize, rows: usize, classes: usize) -> MimoBatch {
        let mut labels = vec![0.0; rows * classes];
        for r in 0..rows {
            labels[r * classes + r % classes] = 1.0;
        }
        MimoBatch {
            inputs: vec![Tensor::zeros(&[rows, 2]); m],
            labels: vec![Tensor::new(vec![rows, classes], labels).unwrap(); m],
            indices: vec![(0..rows).collect(); m],
        }
    }

    fn zeroed(mut net: Network) -> Network {
        for p in net.parameters_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        net
    }

    #[test]
    fn uniform_predictions_cost_log_k_per_head() {
        let net = zeroed(blobs_net(2, Architecture::Mimo, vec![3]));
        let mut g = Graph::new();
        let params: Vec<NodeId> = net.parameters().iter().map(|p| g.parameter(p.tensor.clone())).collect();
        let loss = compute_loss(&mut g, &net, &params, &uniform_batch(2, 6, 4), 0.0, 0.0).unwrap();
        let v = g.value(loss.total).data()[0];
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12, "{v}");
        assert!((2.0 * 4f64.ln() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let mut net = zeroed(blobs_net(1, Architecture::Standard, vec![]));
        // logits favour the labelled class by a margin that saturates softmax in f64
        let b = net.parameter_mut("output.bias").unwrap();
        b.data_mut().copy_from_slice(&[800.0, 0.0, 0.0, 0.0]);
        let mut batch = uniform_batch(1, 3, 4);
        batch.labels[0] = Tensor::new(vec![3, 4], [1.0, 0.0, 0.0, 0.0].repeat(3)).unwrap();
        let mut g = Graph::new();
        let params: Vec<NodeId> = net.parameters().iter().map(|p| g.parameter(p.tensor.clone())).collect();
        let loss = compute_loss(&mut g, &net, &params, &batch, 0.0, 0.0).unwrap();
        assert_eq!(g.value(loss.total).data()[0], 0.0);
    }

    #[test]
    fn zero_steps_leave_parameters_untouched() {
        let net = blobs_net(2, Architecture::Mimo, vec![8]);
        let data = gen_blobs(40, 4, 2, 3.0, 1).unwrap();
        let opt = OptimizerConfig::with_step_decay(0.1, 0);
        let out = train(&net, &data, &sampling(2), &opt, None).unwrap();
        assert_eq!(out.network, net);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn heavy_l2_shrinks_parameters() {
        let net = blobs_net(2, Architecture::Mimo, vec![8]);
        let data = gen_blobs(40, 4, 2, 3.0, 1).unwrap();
        let mut opt = OptimizerConfig::with_step_decay(1e-4, 50);
        opt.l2_coefficient = 1e3;
        let out = train(&net, &data, &sampling(2), &opt, None).unwrap();
        assert!(out.network.squared_norm() < net.squared_norm());
    }

    #[test]
    fn divergence_reports_step() {
        let net = blobs_net(1, Architecture::Standard, vec![8]);
        let data = gen_blobs(40, 4, 2, 3.0, 1).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 1e200,
            ..OptimizerConfig::with_step_decay(1.0, 20)
        };
        match train(&net, &data, &sampling(1), &opt, None) {
            Err(TrainError::Diverged { step, last_finite_loss }) => {
                assert!(step < 20);
                assert!(last_finite_loss.is_none_or(f64::is_finite));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn l1_leaves_exact_zeros_without_data_gradient() {
        // A hidden unit whose outgoing weights are zero and whose incoming
        // weights are zero receives no data gradient; the L1 subgradient at 0 is 0.
        let mut net = blobs_net(1, Architecture::Standard, vec![3]);
        let w1 = net.parameter_mut("hidden0.weight").unwrap();
        for r in 0..2 {
            w1.data_mut()[r * 3] = 0.0;
        }
        net.parameter_mut("hidden0.bias").unwrap().data_mut()[0] = -1.0;
        let w2 = net.parameter_mut("output.weight").unwrap();
        for c in 0..4 {
            w2.data_mut()[c] = 0.0;
        }
        let data = gen_blobs(40, 4, 2, 3.0, 1).unwrap();
        let mut opt = OptimizerConfig::with_step_decay(0.05, 30);
        opt.l1_coefficient = 0.01;
        let out = train(&net, &data, &sampling(1), &opt, None).unwrap();
        let w1 = out.network.parameter("hidden0.weight").unwrap();
        assert_eq!((w1.get(0, 0), w1.get(1, 0)), (0.0, 0.0));
        assert!(out.network.parameter("output.weight").unwrap().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_multipliers_apply_from_their_step() {
        let opt = OptimizerConfig::with_step_decay(0.1, 100);
        assert_eq!(opt.learning_rate_at(0), 0.1);
        assert_eq!(opt.learning_rate_at(49), 0.1);
        assert!((opt.learning_rate_at(50) - 0.01).abs() < 1e-15);
        assert!((opt.learning_rate_at(99) - 0.001).abs() < 1e-15);
        let mut bad = opt.clone();
        bad.schedule.reverse();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn snapshots_have_constant_shape() {
        let net = blobs_net(3, Architecture::Mimo, vec![8]);
        let data = gen_blobs(60, 4, 2, 3.0, 1).unwrap();
        let eval = gen_blobs(10, 4, 2, 3.0, 2).unwrap();
        let mut opt = OptimizerConfig::with_step_decay(0.05, 25);
        opt.snapshot_every = 10;
        let out = train(&net, &data, &sampling(3), &opt, Some(&eval)).unwrap();
        let steps: Vec<usize> = out.trajectory.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert!(out
            .trajectory
            .snapshots
            .iter()
            .all(|s| s.heads.len() == 3 && s.heads.iter().all(|h| h.len() == 40)));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = blobs_net(3, Architecture::Mimo, vec![5, 4]);
        let ck = Checkpoint::new(net.clone(), 12, None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.network.parameters().iter().zip(net.parameters()) {
            let bits_a: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let net = blobs_net(1, Architecture::Standard, vec![2]);
        let bytes = Checkpoint::new(net, 0, None).to_bytes();
        let text = String::from_utf8_lossy(&bytes[9..]).to_string();
        let patched = text.replacen("\"version\":1", "\"version\":7", 1);
        let mut out = bytes[..5].to_vec();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
        out.extend_from_slice(&bytes[9..]);
        out[9..9 + header_len].copy_from_slice(&patched.as_bytes()[..header_len]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(CheckpointError::VersionMismatch { found: 7 })
        ));
    }
}
