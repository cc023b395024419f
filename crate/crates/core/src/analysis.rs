//! Quantitative analyses of trained networks: head diversity, invariance to
//! companion inputs, subnetwork separation through conditional variances,
//! the bias-variance decomposition, accuracy/NLL/ECE and weight sparsity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::experiment::{self, ExperimentError, ExperimentSetup, SweepAxis};
use crate::model::{ModelError, Network, Task};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::training::TrainError;

/// Probabilities are clamped to this floor before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;
/// A weight counts as non-zero when its magnitude exceeds this.
pub const SPARSITY_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_INVARIANCE_RESAMPLES: usize = 8;
pub const DEFAULT_SEPARATION_FIXINGS: usize = 32;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("distributions have different lengths ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("analysis needs at least {required} heads, network has {got}")]
    TooFewHeads { required: usize, got: usize },
    #[error("analysis requires a {0:?} task")]
    WrongTask(Task),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(Box<ExperimentError>),
}

impl From<ExperimentError> for AnalysisError {
    fn from(e: ExperimentError) -> Self {
        Self::Experiment(Box::new(e))
    }
}

impl AnalysisError {
    pub fn is_numeric(&self) -> bool {
        match self {
            Self::Replicate { source, .. } => source.is_numeric(),
            Self::Experiment(e) => e.is_numeric(),
            Self::Train(TrainError::Diverged { .. } | TrainError::NonFiniteLoss { .. }) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn same_len(p1: &[f64], p2: &[f64]) -> Result<()> {
    if p1.len() == p2.len() {
        Ok(())
    } else {
        Err(AnalysisError::DimensionMismatch {
            left: p1.len(),
            right: p2.len(),
        })
    }
}

/// 1 when the predicted classes differ, 0 when they agree.
pub fn disagreement(p1: &[f64], p2: &[f64]) -> Result<f64> {
    same_len(p1, p2)?;
    Ok(if argmax(p1) == argmax(p2) { 0.0 } else { 1.0 })
}

/// `sum p1 * (log p1 - log p2)` with `0 log 0 = 0` and logs taken of
/// probabilities clamped at [`PROBABILITY_FLOOR`].
pub fn kl_divergence(p1: &[f64], p2: &[f64]) -> Result<f64> {
    same_len(p1, p2)?;
    let kl: f64 = p1
        .iter()
        .zip(p2)
        .filter(|(a, _)| **a > 0.0)
        .map(|(&a, &b)| a * (a.max(PROBABILITY_FLOOR).ln() - b.max(PROBABILITY_FLOOR).ln()))
        .sum();
    // clamping can push tiny negatives below zero
    Ok(kl.max(0.0))
}

pub fn cosine_similarity(p1: &[f64], p2: &[f64]) -> Result<f64> {
    same_len(p1, p2)?;
    let dot: f64 = p1.iter().zip(p2).map(|(a, b)| a * b).sum();
    let n1: f64 = p1.iter().map(|a| a * a).sum();
    let n2: f64 = p2.iter().map(|b| b * b).sum();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    Ok((dot / (n1 * n2).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Disagreement,
    Kl,
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [DistanceMetric::Disagreement, DistanceMetric::Kl, DistanceMetric::Cosine];

    pub fn apply(self, p1: &[f64], p2: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::Disagreement => disagreement(p1, p2),
            DistanceMetric::Kl => kl_divergence(p1, p2),
            DistanceMetric::Cosine => cosine_similarity(p1, p2),
        }
    }

    /// Value of the metric between a distribution and itself.
    pub fn identity_value(self) -> f64 {
        match self {
            DistanceMetric::Cosine => 1.0,
            _ => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Disagreement => "disagreement",
            DistanceMetric::Kl => "kl",
            DistanceMetric::Cosine => "cosine",
        }
    }
}

/// Mean of a metric over all ordered head pairs and examples, with the
/// symmetrized per-pair matrix (diagonal holds the metric's identity value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub mean: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub heads: usize,
    pub examples: usize,
    pub disagreement: PairStatistic,
    pub kl: PairStatistic,
    pub cosine: PairStatistic,
}

impl DiversityReport {
    pub fn statistic(&self, metric: DistanceMetric) -> &PairStatistic {
        match metric {
            DistanceMetric::Disagreement => &self.disagreement,
            DistanceMetric::Kl => &self.kl,
            DistanceMetric::Cosine => &self.cosine,
        }
    }
}

fn mean_metric(metric: DistanceMetric, a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..a.rows() {
        total += metric.apply(a.row(r), b.row(r))?;
    }
    Ok(total / a.rows() as f64)
}

/// Pairwise diversity of per-head class distributions on the same examples.
pub fn diversity_of_heads(heads: &[Tensor]) -> Result<DiversityReport> {
    let m = heads.len();
    if m < 2 {
        return Err(AnalysisError::TooFewHeads { required: 2, got: m });
    }
    if let Some(h) = heads.iter().find(|h| h.shape() != heads[0].shape()) {
        return Err(AnalysisError::DimensionMismatch {
            left: heads[0].len(),
            right: h.len(),
        });
    }
    let pair = |metric: DistanceMetric| -> Result<PairStatistic> {
        let mut ordered = vec![vec![metric.identity_value(); m]; m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    ordered[i][j] = mean_metric(metric, &heads[i], &heads[j])?;
                }
            }
        }
        let mut matrix = ordered.clone();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    matrix[i][j] = 0.5 * (ordered[i][j] + ordered[j][i]);
                    total += ordered[i][j];
                }
            }
        }
        Ok(PairStatistic {
            mean: total / (m * (m - 1)) as f64,
            matrix,
        })
    };
    Ok(DiversityReport {
        heads: m,
        examples: heads[0].rows(),
        disagreement: pair(DistanceMetric::Disagreement)?,
        kl: pair(DistanceMetric::Kl)?,
        cosine: pair(DistanceMetric::Cosine)?,
    })
}

fn require_classification(net: &Network) -> Result<()> {
    if net.task() != Task::Classification {
        return Err(AnalysisError::WrongTask(Task::Classification));
    }
    Ok(())
}

fn require_heads(net: &Network, required: usize) -> Result<()> {
    if net.ensemble_size() < required {
        return Err(AnalysisError::TooFewHeads {
            required,
            got: net.ensemble_size(),
        });
    }
    Ok(())
}

/// Diversity of the tiled heads on `dataset`.
pub fn pairwise_diversity(net: &Network, dataset: &Dataset) -> Result<DiversityReport> {
    require_classification(net)?;
    require_heads(net, 2)?;
    diversity_of_heads(&net.forward_tiled(dataset.features())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub split: Split,
    pub examples: usize,
    pub resamples: usize,
    pub disagreement: f64,
    pub kl: f64,
    pub cosine: f64,
}

impl InvarianceReport {
    pub fn value(&self, metric: DistanceMetric) -> f64 {
        match metric {
            DistanceMetric::Disagreement => self.disagreement,
            DistanceMetric::Kl => self.kl,
            DistanceMetric::Cosine => self.cosine,
        }
    }
}

/// How much head 0's prediction for `x` moves when the companion inputs in
/// slots `1..M` are redrawn from `dataset`. Each resample compares two
/// independent companion draws.
pub fn invariance(net: &Network, dataset: &Dataset, resamples: usize, rng: &mut impl Rng) -> Result<InvarianceReport> {
    require_classification(net)?;
    require_heads(net, 2)?;
    if resamples == 0 || dataset.is_empty() {
        return Err(AnalysisError::InvalidArgument(
            "invariance needs at least one resample and one example".into(),
        ));
    }
    let n = dataset.len();
    let m = net.ensemble_size();
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<Tensor> {
        let mut inputs = vec![dataset.features().clone()];
        for _ in 1..m {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            inputs.push(dataset.features().gather_rows(&idx));
        }
        inputs
    };
    let mut totals = [0.0; 3];
    for _ in 0..resamples {
        let first = net.forward_mimo(&draw(rng))?.swap_remove(0);
        let second = net.forward_mimo(&draw(rng))?.swap_remove(0);
        for (t, metric) in totals.iter_mut().zip(DistanceMetric::ALL) {
            *t += mean_metric(metric, &first, &second)?;
        }
    }
    let k = resamples as f64;
    Ok(InvarianceReport {
        split: dataset.split(),
        examples: n,
        resamples,
        disagreement: totals[0] / k,
        kl: totals[1] / k,
        cosine: totals[2] / k,
    })
}

/// Which settings of the other slots a conditional variance averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FixingPlan {
    /// Every tuple of dataset examples for the other slots; the swept slot
    /// covers the whole dataset.
    Exhaustive,
    /// `outer` random tuples for the other slots; the swept slot covers the
    /// whole dataset or `inner` random examples.
    Sampled {
        #[serde(default = "default_outer")]
        outer: usize,
        #[serde(default)]
        inner: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_outer() -> usize {
    DEFAULT_SEPARATION_FIXINGS
}

impl Default for FixingPlan {
    fn default() -> Self {
        FixingPlan::Sampled {
            outer: DEFAULT_SEPARATION_FIXINGS,
            inner: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeparation {
    /// Ensemble member for deep ensembles.
    pub member: Option<usize>,
    pub layer: usize,
    pub unit: usize,
    /// Conditional variance with respect to each input slot.
    pub variances: Vec<f64>,
    pub dominant_slot: usize,
    /// Largest variance over the sum; `None` when every variance is zero.
    pub dominance_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVarianceReport {
    pub slots: usize,
    pub units: Vec<UnitSeparation>,
}

impl ConditionalVarianceReport {
    /// Fraction of units whose dominance share is at least `threshold`.
    pub fn dominant_fraction(&self, threshold: f64) -> f64 {
        let hits = self
            .units
            .iter()
            .filter(|u| u.dominance_share.is_some_and(|s| s >= threshold))
            .count();
        hits as f64 / self.units.len().max(1) as f64
    }
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Rows of the preactivation batch are processed in chunks of about this many.
const SEPARATION_CHUNK_ROWS: usize = 16_384;

/// For every hidden unit and input slot `m`: the variance of the unit's
/// pre-activation as slot `m` sweeps the data with the other slots held
/// fixed, averaged over fixings.
pub fn conditional_variances(net: &Network, dataset: &Dataset, plan: &FixingPlan) -> Result<ConditionalVarianceReport> {
    require_heads(net, 2)?;
    let m = net.ensemble_size();
    if net.input_slots() != m {
        return Err(AnalysisError::InvalidArgument(
            "conditional variances need one input slot per head".into(),
        ));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(AnalysisError::InvalidArgument("need at least 2 examples".into()));
    }
    if let FixingPlan::Sampled { outer, inner, .. } = plan {
        if *outer < 2 || inner.is_some_and(|k| k < 2) {
            return Err(AnalysisError::InvalidArgument(
                "sample counts must be at least 2".into(),
            ));
        }
    }

    let mut per_slot: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut labels = Vec::new();
    for slot in 0..m {
        // (companions for every slot, indices the swept slot takes)
        let fixings: Vec<(Vec<usize>, Vec<usize>)> = match plan {
            FixingPlan::Exhaustive => {
                let combos = n
                    .checked_pow((m - 1) as u32)
                    .filter(|&c| c <= 1_000_000)
                    .ok_or_else(|| AnalysisError::InvalidArgument("too many exhaustive fixings".into()))?;
                (0..combos)
                    .map(|mut c| {
                        let mut tuple = vec![0; m];
                        for (j, t) in tuple.iter_mut().enumerate() {
                            if j != slot {
                                *t = c % n;
                                c /= n;
                            }
                        }
                        (tuple, (0..n).collect())
                    })
                    .collect()
            }
            FixingPlan::Sampled { outer, inner, seed } => {
                let mut rng = rng_from_seed(derive_seed(*seed, slot as u64));
                (0..*outer)
                    .map(|_| {
                        let tuple: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
                        let sweep = match inner {
                            Some(k) => (0..*k).map(|_| rng.random_range(0..n)).collect(),
                            None => (0..n).collect(),
                        };
                        (tuple, sweep)
                    })
                    .collect()
            }
        };

        let mut sums: Vec<f64> = Vec::new();
        let per_chunk = (SEPARATION_CHUNK_ROWS / n.max(1)).max(1);
        for chunk in fixings.chunks(per_chunk) {
            let mut slot_indices = vec![Vec::new(); m];
            for (tuple, sweep) in chunk {
                for &s in sweep {
                    for (j, idx) in slot_indices.iter_mut().enumerate() {
                        idx.push(if j == slot { s } else { tuple[j] });
                    }
                }
            }
            let inputs: Vec<Tensor> = slot_indices.iter().map(|idx| dataset.features().gather_rows(idx)).collect();
            let record = net.record_preactivations(&inputs)?;
            if sums.is_empty() {
                sums = vec![0.0; record.unit_count()];
                labels = record
                    .layers
                    .iter()
                    .flat_map(|l| (0..l.values.cols()).map(move |u| (l.member, l.layer, u)))
                    .collect();
            }
            for (u, total) in sums.iter_mut().enumerate() {
                let values = record.unit_values(u);
                let mut offset = 0;
                for (_, sweep) in chunk {
                    *total += population_variance(&values[offset..offset + sweep.len()]);
                    offset += sweep.len();
                }
            }
        }
        let count = fixings.len() as f64;
        per_slot.push(sums.into_iter().map(|s| s / count).collect());
    }

    let units = labels
        .iter()
        .enumerate()
        .map(|(u, &(member, layer, unit))| {
            let variances: Vec<f64> = per_slot.iter().map(|v| v[u]).collect();
            let total: f64 = variances.iter().sum();
            let dominant_slot = argmax(&variances);
            UnitSeparation {
                member,
                layer,
                unit,
                dominance_share: (total > 0.0).then(|| variances[dominant_slot] / total),
                dominant_slot,
                variances,
            }
        })
        .collect();
    Ok(ConditionalVarianceReport { slots: m, units })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub ensemble_size: usize,
    pub replicates: usize,
    pub test_examples: usize,
    pub expected_error: f64,
    pub bias_squared: f64,
    pub variance: f64,
    /// Standard error of `expected_error` across test points.
    pub error_standard_error: f64,
    /// Standard error of `bias_squared` across test points.
    pub bias_standard_error: f64,
}

impl BiasVarianceReport {
    pub fn identity_gap(&self) -> f64 {
        (self.expected_error - self.bias_squared - self.variance).abs()
    }

    pub fn identity_holds(&self) -> bool {
        self.identity_gap() <= 1e-8 * self.expected_error.max(1.0)
    }
}

fn standard_error(values: &[f64]) -> f64 {
    let (_, sd) = experiment::mean_std(values);
    sd / (values.len() as f64).sqrt()
}

/// Decomposes squared error of `predictions[r][t]` (replicate `r`, test
/// point `t`) against `targets[t]` into squared bias of the replicate mean
/// and variance around it.
pub fn decompose(predictions: &[Vec<f64>], targets: &[f64], ensemble_size: usize) -> Result<BiasVarianceReport> {
    let r = predictions.len();
    if r < 2 {
        return Err(AnalysisError::InvalidArgument("bias-variance needs at least 2 replicates".into()));
    }
    let t = targets.len();
    if t == 0 || predictions.iter().any(|p| p.len() != t) {
        return Err(AnalysisError::InvalidArgument(
            "every replicate needs one prediction per test target".into(),
        ));
    }
    let mut errors = Vec::with_capacity(t);
    let mut biases = Vec::with_capacity(t);
    let mut variances = Vec::with_capacity(t);
    for (j, &y) in targets.iter().enumerate() {
        let mean = predictions.iter().map(|p| p[j]).sum::<f64>() / r as f64;
        errors.push(predictions.iter().map(|p| (p[j] - y).powi(2)).sum::<f64>() / r as f64);
        biases.push((mean - y).powi(2));
        variances.push(predictions.iter().map(|p| (mean - p[j]).powi(2)).sum::<f64>() / r as f64);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / t as f64;
    Ok(BiasVarianceReport {
        ensemble_size,
        replicates: r,
        test_examples: t,
        expected_error: avg(&errors),
        bias_squared: avg(&biases),
        variance: avg(&variances),
        error_standard_error: standard_error(&errors),
        bias_standard_error: standard_error(&biases),
    })
}

/// Trains `replicates` regression models, each on an independently drawn
/// training set with its own initialisation, and decomposes their ensemble
/// test error against the shared test set.
pub fn bias_variance(setup: &ExperimentSetup, replicates: usize, base_seed: u64, workers: usize) -> Result<BiasVarianceReport> {
    if setup.network.task != Task::Regression {
        return Err(AnalysisError::WrongTask(Task::Regression));
    }
    if replicates < 2 {
        return Err(AnalysisError::InvalidArgument("bias-variance needs at least 2 replicates".into()));
    }
    setup.validate()?;
    let indices: Vec<usize> = (0..replicates).collect();
    let runs = experiment::parallel_map(&indices, workers, |&r| {
        let wrap = |e: ExperimentError| ExperimentError::Replicate {
            replicate: r,
            source: Box::new(e),
        };
        let cell = setup.for_replicate(base_seed, r);
        let (train_set, test_set) = cell.data.load(r as u64 + 1).map_err(wrap)?;
        let out = experiment::run(&cell, &train_set, &test_set, None).map_err(wrap)?;
        Ok((out.test.ensemble.into_data(), test_set.labels().data().to_vec()))
    })
    .map_err(|e| match e {
        ExperimentError::Replicate { replicate, source } => AnalysisError::Replicate { replicate, source },
        other => other.into(),
    })?;
    let targets = runs[0].1.clone();
    let predictions: Vec<Vec<f64>> = runs.into_iter().map(|(p, _)| p).collect();
    decompose(&predictions, &targets, setup.network.ensemble_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub accuracy: Option<f64>,
    pub nll: Option<f64>,
    pub ece: Option<f64>,
    pub mse: Option<f64>,
}

/// Bin-weighted gap between confidence (max probability) and accuracy over
/// `bins` equal-width confidence bins.
pub fn expected_calibration_error(probs: &Tensor, classes: &[usize], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut confidence = vec![0.0; bins];
    for (r, &y) in classes.iter().enumerate() {
        let row = probs.row(r);
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        confidence[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = classes.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - confidence[b] / nb).abs()
        })
        .sum()
}

pub fn classification_metrics(probs: &Tensor, classes: &[usize], bins: usize) -> Result<MetricsReport> {
    if probs.rows() != classes.len() || classes.is_empty() {
        return Err(AnalysisError::DimensionMismatch {
            left: probs.rows(),
            right: classes.len(),
        });
    }
    if bins == 0 {
        return Err(AnalysisError::InvalidArgument("ECE needs at least one bin".into()));
    }
    let n = classes.len() as f64;
    let mut hits = 0usize;
    let mut nll = 0.0;
    for (r, &y) in classes.iter().enumerate() {
        let row = probs.row(r);
        if argmax(row) == y {
            hits += 1;
        }
        nll -= row[y].max(PROBABILITY_FLOOR).ln();
    }
    Ok(MetricsReport {
        examples: classes.len(),
        accuracy: Some(hits as f64 / n),
        nll: Some(nll / n),
        ece: Some(expected_calibration_error(probs, classes, bins)),
        mse: None,
    })
}

/// Metrics of a predictive distribution (or regression mean) on `dataset`.
pub fn prediction_metrics(pred: &Tensor, dataset: &Dataset) -> Result<MetricsReport> {
    match dataset.task() {
        Task::Classification => {
            let classes: Vec<usize> = (0..dataset.len()).map(|i| dataset.class_of(i)).collect();
            classification_metrics(pred, &classes, DEFAULT_ECE_BINS)
        }
        Task::Regression => {
            let y = dataset.labels();
            if pred.len() != y.len() {
                return Err(AnalysisError::DimensionMismatch {
                    left: pred.len(),
                    right: y.len(),
                });
            }
            let mse = pred.data().iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
            Ok(MetricsReport {
                examples: dataset.len(),
                accuracy: None,
                nll: None,
                ece: None,
                mse: Some(mse),
            })
        }
    }
}

/// Ensemble metrics under tiled evaluation.
pub fn metrics(net: &Network, dataset: &Dataset) -> Result<MetricsReport> {
    let eval = crate::training::evaluate(net, dataset)?;
    prediction_metrics(&eval.ensemble, dataset)
}

/// Metrics of every tiled head on its own.
pub fn head_metrics(net: &Network, dataset: &Dataset) -> Result<Vec<MetricsReport>> {
    net.forward_tiled(dataset.features())?
        .iter()
        .map(|h| prediction_metrics(h, dataset))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub weights: usize,
    pub nonzero: usize,
    pub nonzero_fraction: f64,
}

pub fn nonzero_fraction(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.abs() > threshold).count() as f64 / values.len() as f64
}

/// Share of weight entries (biases excluded) with magnitude above `threshold`.
pub fn sparsity(net: &Network, threshold: f64) -> SparsityReport {
    let weights: Vec<f64> = net
        .parameters()
        .iter()
        .filter(|p| p.is_weight())
        .flat_map(|p| p.tensor.data().iter().copied())
        .collect();
    let nonzero = weights.iter().filter(|v| v.abs() > threshold).count();
    SparsityReport {
        threshold,
        weights: weights.len(),
        nonzero,
        nonzero_fraction: nonzero_fraction(&weights, threshold),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationRow {
    pub axis: SweepAxis,
    pub lambda: f64,
    pub ensemble_size: usize,
    pub replicates: usize,
    pub accuracy: Option<f64>,
    pub nll: Option<f64>,
    pub nonzero_fraction: f64,
}

/// Full factorial sweep over `lambdas x ensemble_sizes` along the L1 or L2
/// axis with the other coefficient held at zero; each cell averages
/// `replicates` runs.
pub fn regularization_sweep(
    setup: &ExperimentSetup,
    axis: SweepAxis,
    lambdas: &[f64],
    ensemble_sizes: &[usize],
    replicates: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<RegularizationRow>> {
    if !matches!(axis, SweepAxis::L1 | SweepAxis::L2) {
        return Err(AnalysisError::InvalidArgument(format!("{axis} is not a regularization axis")));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(AnalysisError::InvalidArgument(format!("lambda {bad} is negative")));
    }
    let mut base = setup.clone();
    base.optimizer.l1_coefficient = 0.0;
    base.optimizer.l2_coefficient = 0.0;
    let mut out = Vec::new();
    for &m in ensemble_sizes {
        let cell = SweepAxis::EnsembleSize.apply(&base, m as f64)?;
        let rows = experiment::sweep(&cell, axis, lambdas, replicates, base_seed, workers)?;
        for s in experiment::summarize(&rows) {
            out.push(RegularizationRow {
                axis,
                lambda: s.value,
                ensemble_size: m,
                replicates: s.replicates,
                accuracy: s.accuracy.map(|a| a.0),
                nll: s.nll.map(|a| a.0),
                nonzero_fraction: s.nonzero_fraction.0,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::model::{build_network, Architecture, NetworkConfig};

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(disagreement(&[0.9, 0.1], &[0.2, 0.8]).unwrap(), 1.0);
        assert_eq!(disagreement(&[0.55, 0.45], &[0.9, 0.1]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(AnalysisError::ZeroVector)));
        assert!(matches!(disagreement(&[1.0], &[0.5, 0.5]), Err(AnalysisError::DimensionMismatch { .. })));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn ece_single_bin_and_perfect_predictions() {
        let p = probs(&[&[0.8, 0.2][..]; 10]);
        let classes = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let report = classification_metrics(&p, &classes, 15).unwrap();
        assert!((report.ece.unwrap() - 0.2).abs() < 1e-12);
        assert!((report.accuracy.unwrap() - 0.6).abs() < 1e-12);

        let perfect = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = classification_metrics(&perfect, &[0, 1], 15).unwrap();
        assert_eq!((r.accuracy, r.nll, r.ece), (Some(1.0), Some(0.0), Some(0.0)));

        let uniform = probs(&[&[0.25; 4][..]; 3]);
        let r = classification_metrics(&uniform, &[0, 1, 3], 15).unwrap();
        assert!((r.nll.unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn calibrated_predictions_have_small_ece() {
        let bins = 15;
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for b in 0..bins {
            let c = ((b as f64 + 0.5) / bins as f64).max(0.5);
            let n = 40;
            let correct = (c * n as f64).round() as usize;
            for i in 0..n {
                rows.push(vec![c, 1.0 - c]);
                classes.push(if i < correct { 0 } else { 1 });
            }
        }
        let p = Tensor::from_rows(&rows).unwrap();
        assert!(expected_calibration_error(&p, &classes, bins) <= 1.0 / (2.0 * bins as f64));
    }

    #[test]
    fn decomposition_edge_cases() {
        let zeros = vec![vec![0.0; 5]; 3];
        let r = decompose(&zeros, &[1.0; 5], 1).unwrap();
        assert_eq!((r.expected_error, r.bias_squared, r.variance), (1.0, 1.0, 0.0));
        let same = vec![vec![0.3, -0.2, 1.1]; 4];
        let r = decompose(&same, &[0.0, 0.1, 0.2], 1).unwrap();
        assert_eq!(r.variance, 0.0);
        assert!(r.identity_holds());
        assert!(decompose(&same[..1], &[0.0, 0.1, 0.2], 1).is_err());
    }

    #[test]
    fn sparsity_counts_weights_only() {
        assert!((nonzero_fraction(&[0.0, 2e-4, -5e-5], SPARSITY_THRESHOLD) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(nonzero_fraction(&[0.0; 4], SPARSITY_THRESHOLD), 0.0);
        let net = build_network(&NetworkConfig {
            ensemble_size: 2,
            input_dim: 3,
            hidden_widths: vec![16],
            output_dim: 2,
            task: Task::Classification,
            architecture: Architecture::Mimo,
            init_seed: 1,
        })
        .unwrap();
        let report = sparsity(&net, SPARSITY_THRESHOLD);
        assert_eq!(report.weights, 6 * 16 + 16 * 4);
        assert!(report.nonzero_fraction > 0.99);
    }

    fn duplicate_head_net() -> Network {
        let mut net = build_network(&NetworkConfig {
            ensemble_size: 3,
            input_dim: 2,
            hidden_widths: vec![6],
            output_dim: 3,
            task: Task::Classification,
            architecture: Architecture::NaiveMultihead,
            init_seed: 2,
        })
        .unwrap();
        let w = net.parameter("output.weight").unwrap().clone();
        let dst = net.parameter_mut("output.weight").unwrap();
        for r in 0..w.rows() {
            for m in 1..3 {
                for k in 0..3 {
                    dst.data_mut()[r * 9 + m * 3 + k] = w.get(r, k);
                }
            }
        }
        net
    }

    #[test]
    fn duplicate_heads_have_no_diversity() {
        let net = duplicate_head_net();
        let data = gen_blobs(30, 3, 2, 2.0, 0).unwrap();
        let d = pairwise_diversity(&net, &data).unwrap();
        assert_eq!(d.disagreement.mean, 0.0);
        assert_eq!(d.kl.mean, 0.0);
        assert_eq!(d.cosine.mean, 1.0);
        for i in 0..3 {
            assert_eq!(d.disagreement.matrix[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(d.kl.matrix[i][j], d.kl.matrix[j][i]);
            }
        }
    }

    #[test]
    fn single_head_network_has_no_pairs() {
        let net = build_network(&NetworkConfig {
            ensemble_size: 1,
            input_dim: 2,
            hidden_widths: vec![4],
            output_dim: 3,
            task: Task::Classification,
            architecture: Architecture::Standard,
            init_seed: 2,
        })
        .unwrap();
        let data = gen_blobs(10, 3, 2, 2.0, 0).unwrap();
        assert!(matches!(
            pairwise_diversity(&net, &data),
            Err(AnalysisError::TooFewHeads { required: 2, got: 1 })
        ));
        let mut rng = rng_from_seed(0);
        assert!(invariance(&net, &data, 2, &mut rng).is_err());
    }

    #[test]
    fn structurally_invariant_head() {
        let mut net = build_network(&NetworkConfig {
            ensemble_size: 3,
            input_dim: 2,
            hidden_widths: vec![5],
            output_dim: 3,
            task: Task::Classification,
            architecture: Architecture::Mimo,
            init_seed: 4,
        })
        .unwrap();
        // hidden units 0..2 read only slot 0 and feed only head 0; head 0 ignores the rest
        let w = net.parameter_mut("hidden0.weight").unwrap();
        for r in 2..6 {
            for c in 0..2 {
                w.data_mut()[r * 5 + c] = 0.0;
            }
        }
        let out = net.parameter_mut("output.weight").unwrap();
        for r in 2..5 {
            for k in 0..3 {
                out.data_mut()[r * 9 + k] = 0.0;
            }
        }
        let data = gen_blobs(40, 3, 2, 2.0, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let report = invariance(&net, &data, 4, &mut rng).unwrap();
        assert_eq!((report.disagreement, report.kl, report.cosine), (0.0, 0.0, 1.0));
    }

    #[test]
    fn invariance_of_random_network_is_positive() {
        let net = build_network(&NetworkConfig {
            ensemble_size: 3,
            input_dim: 2,
            hidden_widths: vec![16],
            output_dim: 4,
            task: Task::Classification,
            architecture: Architecture::Mimo,
            init_seed: 4,
        })
        .unwrap();
        let data = gen_blobs(200, 4, 2, 2.0, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let report = invariance(&net, &data, 4, &mut rng).unwrap();
        assert!(report.disagreement > 0.05, "{report:?}");
        assert!(report.kl > 0.0 && report.cosine < 1.0);
    }

    #[test]
    fn constant_units_have_zero_conditional_variance() {
        let mut net = build_network(&NetworkConfig {
            ensemble_size: 2,
            input_dim: 2,
            hidden_widths: vec![3],
            output_dim: 2,
            task: Task::Classification,
            architecture: Architecture::Mimo,
            init_seed: 0,
        })
        .unwrap();
        net.parameter_mut("hidden0.weight").unwrap().data_mut().fill(0.0);
        net.parameter_mut("hidden0.bias").unwrap().data_mut().fill(0.7);
        let data = gen_blobs(4, 2, 2, 1.0, 0).unwrap();
        let report = conditional_variances(&net, &data, &FixingPlan::Exhaustive).unwrap();
        assert_eq!(report.units.len(), 3);
        for u in &report.units {
            assert_eq!(u.variances, vec![0.0, 0.0]);
            assert_eq!(u.dominance_share, None);
        }
        let bad = FixingPlan::Sampled {
            outer: 1,
            inner: None,
            seed: 0,
        };
        assert!(conditional_variances(&net, &data, &bad).is_err());
    }

    #[test]
    fn dominance_shares_are_bounded() {
        let net = build_network(&NetworkConfig {
            ensemble_size: 3,
            input_dim: 2,
            hidden_widths: vec![8, 4],
            output_dim: 2,
            task: Task::Classification,
            architecture: Architecture::Mimo,
            init_seed: 9,
        })
        .unwrap();
        let data = gen_blobs(20, 2, 2, 1.0, 0).unwrap();
        let report = conditional_variances(&net, &data, &FixingPlan::default()).unwrap();
        assert_eq!(report.units.len(), 12);
        for u in &report.units {
            let s = u.dominance_share.unwrap();
            assert!((1.0 / 3.0 - 1e-12..=1.0).contains(&s));
            assert!(u.variances.iter().all(|&v| v >= 0.0));
        }
    }
}
