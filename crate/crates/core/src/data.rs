//! Datasets, synthetic generators and the M-tuple batch sampler.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Task;
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: line {line}, column {column:?}: cannot parse {value:?} as a number")]
    NonNumeric {
        path: String,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}: class label {value:?} is not an index below {classes}")]
    InvalidLabel {
        path: String,
        line: u64,
        value: String,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled examples: `features` is `N x input_dim`; `labels` is one-hot
/// `N x classes` for classification and `N x 1` for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Tensor,
    task: Task,
    split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Tensor, task: Task, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || labels.shape().len() != 2 {
            return Err(DataError::Invalid("features and labels must be matrices".into()));
        }
        if features.rows() != labels.rows() {
            return Err(DataError::Invalid(format!(
                "{} feature rows but {} label rows",
                features.rows(),
                labels.rows()
            )));
        }
        if !features.is_finite() || !labels.is_finite() {
            return Err(DataError::Invalid("dataset contains non-finite values".into()));
        }
        match task {
            Task::Classification => {
                for r in 0..labels.rows() {
                    let row = labels.row(r);
                    let ones = row.iter().filter(|&&v| v == 1.0).count();
                    let zeros = row.iter().filter(|&&v| v == 0.0).count();
                    if ones != 1 || ones + zeros != row.len() {
                        return Err(DataError::Invalid(format!("label row {r} is not one-hot")));
                    }
                }
            }
            Task::Regression => {
                if labels.cols() != 1 {
                    return Err(DataError::Invalid("regression labels must have one column".into()));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            task,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Label columns: class count for classification, 1 for regression.
    pub fn label_dim(&self) -> usize {
        self.labels.cols()
    }

    /// Class index of example `i` (classification only).
    pub fn class_of(&self, i: usize) -> usize {
        self.labels
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot label")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: self.labels.gather_rows(indices),
            task: self.task,
            split: self.split,
        }
    }

    /// First `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Target of the synthetic regression curve at `x` with noise draw `eps`.
pub fn noisy_target(x: f64, eps: f64) -> f64 {
    let z = x + eps;
    x + 0.3 * (2.0 * PI * z).sin() + 0.3 * (4.0 * PI * z).sin() + eps
}

/// One-dimensional regression set: `x` uniform on `x_range`,
/// `y = noisy_target(x, eps)` with `eps ~ N(0, noise_sd)`.
pub fn gen_noisy_regression(n: usize, seed: u64, x_range: (f64, f64), noise_sd: f64) -> Result<Dataset> {
    let (lo, hi) = x_range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(DataError::InvalidConfig {
            field: "x_range",
            reason: format!("empty or non-finite interval [{lo}, {hi}]"),
        });
    }
    if n == 0 {
        return Err(DataError::InvalidConfig {
            field: "n",
            reason: "must be at least 1".into(),
        });
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(DataError::InvalidConfig {
            field: "noise_sd",
            reason: format!("must be a finite non-negative number, got {noise_sd}"),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(lo..hi);
        let eps = noise_sd * rng.sample::<f64, _>(StandardNormal);
        xs.push(x);
        ys.push(noisy_target(x, eps));
    }
    Dataset::new(
        Tensor::new(vec![n, 1], xs).expect("n > 0"),
        Tensor::new(vec![n, 1], ys).expect("n > 0"),
        Task::Regression,
        Split::Train,
    )
}

/// Centre of class `c` among `classes` for [`gen_blobs`].
pub fn blob_center(c: usize, classes: usize, input_dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; input_dim];
    if input_dim == 1 {
        center[0] = separation * (c as f64 - (classes as f64 - 1.0) / 2.0);
    } else {
        let angle = 2.0 * PI * c as f64 / classes as f64;
        center[0] = separation * angle.cos();
        center[1] = separation * angle.sin();
    }
    center
}

/// Isotropic unit-variance Gaussian clusters; example `i` belongs to class
/// `i % classes`, so class counts differ by at most one.
pub fn gen_blobs(n: usize, classes: usize, input_dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(DataError::InvalidConfig {
            field: "classes",
            reason: "need at least 2 classes".into(),
        });
    }
    if n == 0 || input_dim == 0 {
        return Err(DataError::InvalidConfig {
            field: "n",
            reason: "example count and input_dim must be positive".into(),
        });
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| blob_center(c, classes, input_dim, separation))
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = vec![0.0; n * classes];
    for i in 0..n {
        let c = i % classes;
        for &mu in &centers[c] {
            features.push(mu + rng.sample::<f64, _>(StandardNormal));
        }
        labels[i * classes + c] = 1.0;
    }
    Dataset::new(
        Tensor::new(vec![n, input_dim], features).expect("n > 0"),
        Tensor::new(vec![n, classes], labels).expect("n > 0"),
        Task::Classification,
        Split::Train,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    /// Class count for classification; inferred from the largest label when absent.
    #[serde(default)]
    pub classes: Option<usize>,
}

/// Reads a headed, comma-separated numeric file. Classification labels are
/// class indices and become one-hot rows.
pub fn load_csv(path: &Path, schema: &CsvSchema, task: Task) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: shown.clone(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: shown.clone(),
            source,
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: shown.clone(),
                column: name.to_string(),
            })
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<_>>()?;
    let label_idx = column(&schema.label_column)?;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: shown.clone(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let cell = record.get(idx).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    path: shown.clone(),
                    line,
                    column: name.to_string(),
                    value: cell.to_string(),
                })
        };
        for (&idx, name) in feature_idx.iter().zip(&schema.feature_columns) {
            features.push(parse(idx, name)?);
        }
        raw_labels.push((line, parse(label_idx, &schema.label_column)?));
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(DataError::Empty { path: shown });
    }
    let features = Tensor::new(vec![n, schema.feature_columns.len()], features)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels = match task {
        Task::Regression => Tensor::new(vec![n, 1], raw_labels.iter().map(|&(_, v)| v).collect()),
        Task::Classification => {
            let inferred = raw_labels.iter().map(|&(_, v)| v.max(0.0) as usize + 1).max().unwrap_or(2);
            let classes = schema.classes.unwrap_or(inferred.max(2));
            let mut data = vec![0.0; n * classes];
            for (i, &(line, v)) in raw_labels.iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                    return Err(DataError::InvalidLabel {
                        path: shown,
                        line,
                        value: v.to_string(),
                        classes,
                    });
                }
                data[i * classes + v as usize] = 1.0;
            }
            Tensor::new(vec![n, classes], data)
        }
    }
    .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, task, Split::Train)
}

/// Writes `x0..x{d-1},label` (class index or regression target).
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let shown = path.display().to_string();
    let csv_err = |source| DataError::Csv {
        path: shown.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.input_dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.features().row(i).iter().map(|v| v.to_string()).collect();
        row.push(match dataset.task() {
            Task::Classification => dataset.class_of(i).to_string(),
            Task::Regression => dataset.labels().get(i, 0).to_string(),
        });
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| DataError::Io { path: shown, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub batch_size: usize,
    pub ensemble_size: usize,
    #[serde(default)]
    pub input_repetition_probability: f64,
    #[serde(default = "one")]
    pub batch_repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(DataError::InvalidConfig { field, reason });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size", "must be positive".into());
        }
        let rho = self.input_repetition_probability;
        if !(0.0..=1.0).contains(&rho) {
            return bad(
                "input_repetition_probability",
                format!("must lie in [0, 1], got {rho}"),
            );
        }
        if self.batch_repetitions == 0 {
            return bad("batch_repetitions", "must be at least 1".into());
        }
        Ok(())
    }
}

/// `M` slots of `(batch_size * batch_repetitions)` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoBatch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Tensor>,
    /// Dataset row behind every batch row, per slot.
    pub indices: Vec<Vec<usize>>,
}

impl MimoBatch {
    pub fn rows(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

/// Draws dataset indices for one batch. Slot 0 is uniform with replacement;
/// each row of every other slot copies slot 0 with probability `rho` and is
/// an independent uniform draw otherwise. Each row is then repeated
/// `batch_repetitions` times, copies adjacent.
pub fn sample_indices(n: usize, config: &SamplingConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let base: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
    let mut slots = vec![base.clone()];
    for _ in 1..config.ensemble_size {
        let slot = base
            .iter()
            .map(|&b| {
                if rng.random_bool(config.input_repetition_probability) {
                    b
                } else {
                    rng.random_range(0..n)
                }
            })
            .collect();
        slots.push(slot);
    }
    if config.batch_repetitions > 1 {
        for slot in &mut slots {
            *slot = slot
                .iter()
                .flat_map(|&i| std::iter::repeat_n(i, config.batch_repetitions))
                .collect();
        }
    }
    slots
}

pub fn sample_mimo_batch(dataset: &Dataset, config: &SamplingConfig, rng: &mut impl Rng) -> Result<MimoBatch> {
    if dataset.is_empty() {
        return Err(DataError::Invalid("cannot sample from an empty dataset".into()));
    }
    config.validate()?;
    let indices = sample_indices(dataset.len(), config, rng);
    Ok(MimoBatch {
        inputs: indices.iter().map(|idx| dataset.features().gather_rows(idx)).collect(),
        labels: indices.iter().map(|idx| dataset.labels().gather_rows(idx)).collect(),
        indices,
    })
}

/// Owns the RNG stream for a sequence of batches.
#[derive(Debug, Clone)]
pub struct MimoSampler {
    config: SamplingConfig,
    rng: ChaCha8Rng,
}

impl MimoSampler {
    pub fn new(config: SamplingConfig) -> Result<Self> {
        config.validate()?;
        let rng = rng_from_seed(config.seed);
        Ok(Self { config, rng })
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    pub fn sample(&mut self, dataset: &Dataset) -> Result<MimoBatch> {
        sample_mimo_batch(dataset, &self.config, &mut self.rng)
    }

    /// Independent sampler for a parallel replicate.
    pub fn fork(&self, stream: u64) -> Self {
        let mut config = self.config.clone();
        config.seed = derive_seed(config.seed, stream);
        let rng = rng_from_seed(config.seed);
        Self { config, rng }
    }

    /// Word position of the underlying stream, for checkpoint metadata.
    pub fn stream_position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}
