//! Replicated train/evaluate runs and one-axis parameter sweeps.
//!
//! Every replicate derives its initialisation and sampler seeds from a base
//! seed and the replicate index, so a list of seeds fully determines a
//! sweep regardless of how cells are scheduled.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, MetricsReport};
use crate::data::{gen_blobs, gen_noisy_regression, load_csv, CsvSchema, DataError, Dataset, SamplingConfig, Split};
use crate::model::{build_network, Architecture, ModelError, Network, NetworkConfig, Task};
use crate::seed::derive_seed;
use crate::training::{evaluate, train, Evaluation, OptimizerConfig, TrainError, TrajectoryLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    InvalidSetup(String),
    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("sweep cell {axis}={value} replicate {replicate}: {source}")]
    Cell {
        axis: SweepAxis,
        value: f64,
        replicate: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] Box<AnalysisError>),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl From<AnalysisError> for ExperimentError {
    fn from(e: AnalysisError) -> Self {
        Self::Analysis(Box::new(e))
    }
}

impl ExperimentError {
    /// True when the root cause is a numeric failure (divergence, overflow).
    pub fn is_numeric(&self) -> bool {
        match self {
            Self::Replicate { source, .. } | Self::Cell { source, .. } => source.is_numeric(),
            Self::Train(TrainError::Diverged { .. } | TrainError::NonFiniteLoss { .. }) => true,
            Self::Analysis(a) => a.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Stream used for the fixed test split of generated data.
const TEST_STREAM: u64 = u64::MAX;

fn default_train_range() -> (f64, f64) {
    (0.0, 0.5)
}

fn default_test_range() -> (f64, f64) {
    (-0.2, 0.7)
}

fn default_noise() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Regression {
        train_size: usize,
        test_size: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
        #[serde(default = "default_train_range")]
        train_range: (f64, f64),
        #[serde(default = "default_test_range")]
        test_range: (f64, f64),
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        train_size: usize,
        test_size: usize,
        classes: usize,
        input_dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        task: Task,
        schema: CsvSchema,
    },
}

impl DataSource {
    pub fn task(&self) -> Task {
        match self {
            DataSource::Regression { .. } => Task::Regression,
            DataSource::Blobs { .. } => Task::Classification,
            DataSource::Csv { task, .. } => *task,
        }
    }

    /// Train and test splits. `train_stream` selects an independent training
    /// draw for generated data (0 is the canonical one); the test split never
    /// depends on it.
    pub fn load(&self, train_stream: u64) -> Result<(Dataset, Dataset)> {
        Ok(match self {
            DataSource::Regression {
                train_size,
                test_size,
                noise_sd,
                train_range,
                test_range,
                seed,
            } => (
                gen_noisy_regression(*train_size, derive_seed(*seed, train_stream), *train_range, *noise_sd)?,
                gen_noisy_regression(*test_size, derive_seed(*seed, TEST_STREAM), *test_range, *noise_sd)?
                    .with_split(Split::Test),
            ),
            DataSource::Blobs {
                train_size,
                test_size,
                classes,
                input_dim,
                separation,
                seed,
            } => (
                gen_blobs(*train_size, *classes, *input_dim, *separation, derive_seed(*seed, train_stream))?,
                gen_blobs(*test_size, *classes, *input_dim, *separation, derive_seed(*seed, TEST_STREAM))?
                    .with_split(Split::Test),
            ),
            DataSource::Csv {
                train_path,
                test_path,
                task,
                schema,
            } => (
                load_csv(train_path, schema, *task)?,
                load_csv(test_path, schema, *task)?.with_split(Split::Test),
            ),
        })
    }
}

/// Everything needed to train and evaluate one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub data: DataSource,
    pub network: NetworkConfig,
    pub sampling: SamplingConfig,
    pub optimizer: OptimizerConfig,
}

impl ExperimentSetup {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.sampling.validate()?;
        self.optimizer.validate()?;
        if self.network.ensemble_size != self.sampling.ensemble_size {
            return Err(ExperimentError::InvalidSetup(format!(
                "network has {} heads but the sampler draws {} slots",
                self.network.ensemble_size, self.sampling.ensemble_size
            )));
        }
        if self.network.task != self.data.task() {
            return Err(ExperimentError::InvalidSetup(format!(
                "network task {:?} does not match data task {:?}",
                self.network.task,
                self.data.task()
            )));
        }
        Ok(())
    }

    /// Copy with initialisation and sampler seeds for replicate `r`.
    pub fn for_replicate(&self, base_seed: u64, replicate: usize) -> Self {
        let mut s = self.clone();
        let r = replicate as u64;
        s.network.init_seed = derive_seed(base_seed, 2 * r);
        s.sampling.seed = derive_seed(base_seed, 2 * r + 1);
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub network: Network,
    pub loss_curve: Vec<f64>,
    pub trajectory: TrajectoryLog,
    pub test: Evaluation,
    pub test_metrics: MetricsReport,
}

/// Trains on `train` and evaluates the ensemble on `test`.
pub fn run(setup: &ExperimentSetup, train_set: &Dataset, test_set: &Dataset, snapshot_set: Option<&Dataset>) -> Result<RunOutcome> {
    setup.validate()?;
    if train_set.input_dim() != setup.network.input_dim {
        return Err(ExperimentError::InvalidSetup(format!(
            "data has {} features but network.input_dim is {}",
            train_set.input_dim(),
            setup.network.input_dim
        )));
    }
    let net = build_network(&setup.network)?;
    let outcome = train(&net, train_set, &setup.sampling, &setup.optimizer, snapshot_set)?;
    let test = evaluate(&outcome.network, test_set)?;
    let test_metrics = analysis::prediction_metrics(&test.ensemble, test_set)?;
    Ok(RunOutcome {
        network: outcome.network,
        loss_curve: outcome.loss_curve,
        trajectory: outcome.trajectory,
        test,
        test_metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "M")]
    EnsembleSize,
    Rho,
    BatchRepetitions,
    L1,
    L2,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::EnsembleSize => "M",
            SweepAxis::Rho => "rho",
            SweepAxis::BatchRepetitions => "batch_repetitions",
            SweepAxis::L1 => "l1",
            SweepAxis::L2 => "l2",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" | "m" => Ok(SweepAxis::EnsembleSize),
            "rho" => Ok(SweepAxis::Rho),
            "batch_repetitions" => Ok(SweepAxis::BatchRepetitions),
            "l1" => Ok(SweepAxis::L1),
            "l2" => Ok(SweepAxis::L2),
            other => Err(format!("unknown sweep axis {other:?} (expected M, rho, batch_repetitions, l1 or l2)")),
        }
    }
}

fn as_count(axis: SweepAxis, value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value <= 1e6 {
        Ok(value as usize)
    } else {
        Err(ExperimentError::InvalidSetup(format!("{axis} needs a positive integer, got {value}")))
    }
}

impl SweepAxis {
    /// `setup` with this axis set to `value`.
    pub fn apply(self, setup: &ExperimentSetup, value: f64) -> Result<ExperimentSetup> {
        let mut s = setup.clone();
        match self {
            SweepAxis::EnsembleSize => {
                let m = as_count(self, value)?;
                if s.network.architecture == Architecture::Standard {
                    if m != 1 {
                        return Err(ExperimentError::InvalidSetup(
                            "an M sweep needs a multi-head architecture, not standard".into(),
                        ));
                    }
                }
                s.network.ensemble_size = m;
                s.sampling.ensemble_size = m;
            }
            SweepAxis::Rho => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ExperimentError::InvalidSetup(format!("rho must lie in [0, 1], got {value}")));
                }
                s.sampling.input_repetition_probability = value;
            }
            SweepAxis::BatchRepetitions => s.sampling.batch_repetitions = as_count(self, value)?,
            SweepAxis::L1 | SweepAxis::L2 => {
                if !(value >= 0.0) || !value.is_finite() {
                    return Err(ExperimentError::InvalidSetup(format!("{self} must be non-negative, got {value}")));
                }
                if self == SweepAxis::L1 {
                    s.optimizer.l1_coefficient = value;
                } else {
                    s.optimizer.l2_coefficient = value;
                }
            }
        }
        s.validate()?;
        Ok(s)
    }
}

/// Test-set results of one `(value, replicate)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub replicate: usize,
    pub ensemble_size: usize,
    pub final_loss: f64,
    pub metrics: MetricsReport,
    /// Mean pairwise head disagreement on the test set (classification, M >= 2).
    pub disagreement: Option<f64>,
    pub nonzero_fraction: f64,
}

pub fn run_cell(setup: &ExperimentSetup, axis: SweepAxis, value: f64, replicate: usize, base_seed: u64) -> Result<SweepRow> {
    let wrap = |e: ExperimentError| ExperimentError::Cell {
        axis,
        value,
        replicate,
        source: Box::new(e),
    };
    let cell = axis.apply(setup, value).map_err(wrap)?.for_replicate(base_seed, replicate);
    let (train_set, test_set) = cell.data.load(0).map_err(wrap)?;
    let outcome = run(&cell, &train_set, &test_set, None).map_err(wrap)?;
    let disagreement = (cell.network.task == Task::Classification && cell.network.ensemble_size >= 2)
        .then(|| analysis::diversity_of_heads(&outcome.test.heads).map(|d| d.disagreement.mean))
        .transpose()
        .map_err(|e| wrap(e.into()))?;
    Ok(SweepRow {
        axis,
        value,
        replicate,
        ensemble_size: cell.network.ensemble_size,
        final_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        metrics: outcome.test_metrics,
        disagreement,
        nonzero_fraction: analysis::sparsity(&outcome.network, analysis::SPARSITY_THRESHOLD).nonzero_fraction,
    })
}

/// Runs `f` over `items` on a pool of `workers` threads; results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Full sweep: one row per `(value, replicate)`, values outermost.
pub fn sweep(
    setup: &ExperimentSetup,
    axis: SweepAxis,
    values: &[f64],
    replicates: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ExperimentError::InvalidSetup("sweep needs at least one value".into()));
    }
    if replicates == 0 {
        return Err(ExperimentError::InvalidSetup("sweep needs at least one replicate".into()));
    }
    let cells: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..replicates).map(move |r| (v, r)))
        .collect();
    parallel_map(&cells, workers, |&(v, r)| run_cell(setup, axis, v, r, base_seed))
}

/// Mean and sample standard deviation of each numeric column for one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub replicates: usize,
    pub accuracy: Option<(f64, f64)>,
    pub nll: Option<(f64, f64)>,
    pub ece: Option<(f64, f64)>,
    pub mse: Option<(f64, f64)>,
    pub disagreement: Option<(f64, f64)>,
    pub nonzero_fraction: (f64, f64),
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let column = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
                let xs: Option<Vec<f64>> = group.iter().map(|r| f(r)).collect();
                xs.map(|xs| mean_std(&xs))
            };
            SweepSummary {
                value: v,
                replicates: group.len(),
                accuracy: column(&|r| r.metrics.accuracy),
                nll: column(&|r| r.metrics.nll),
                ece: column(&|r| r.metrics.ece),
                mse: column(&|r| r.metrics.mse),
                disagreement: column(&|r| r.disagreement),
                nonzero_fraction: mean_std(&group.iter().map(|r| r.nonzero_fraction).collect::<Vec<_>>()),
            }
        })
        .collect()
}
