//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use mimo_core::analysis::{FixingPlan, DEFAULT_INVARIANCE_RESAMPLES, SPARSITY_THRESHOLD};
use mimo_core::data::{DataError, SamplingConfig};
use mimo_core::experiment::{DataSource, ExperimentSetup, SweepAxis};
use mimo_core::landscape::PlaneOptions;
use mimo_core::model::{ModelError, NetworkConfig};
use mimo_core::seed::derive_seed;
use mimo_core::training::{OptimizerConfig, ScheduleStep, TrainError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

fn one() -> usize {
    1
}

/// Sampler settings; the slot count always follows `network.ensemble_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub batch_size: usize,
    #[serde(default)]
    pub input_repetition_probability: f64,
    #[serde(default = "one")]
    pub batch_repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub steps: usize,
    /// Absent means a 10x drop at half and again at three quarters of `steps`.
    #[serde(default)]
    pub schedule: Option<Vec<ScheduleStep>>,
    #[serde(default)]
    pub l2_coefficient: f64,
    #[serde(default)]
    pub l1_coefficient: f64,
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_resamples() -> usize {
    DEFAULT_INVARIANCE_RESAMPLES
}

fn default_threshold() -> f64 {
    SPARSITY_THRESHOLD
}

fn default_dominance() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_resamples")]
    pub invariance_resamples: usize,
    #[serde(default)]
    pub separation: FixingPlan,
    /// Dominance share at which a unit counts as belonging to one subnetwork.
    #[serde(default = "default_dominance")]
    pub dominance_threshold: f64,
    #[serde(default = "default_threshold")]
    pub sparsity_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            invariance_resamples: default_resamples(),
            separation: FixingPlan::default(),
            dominance_threshold: default_dominance(),
            sparsity_threshold: default_threshold(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub replicates: usize,
    /// Every value is also crossed with each of these ensemble sizes.
    #[serde(default)]
    pub ensemble_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasVarianceSection {
    pub ensemble_sizes: Vec<usize>,
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub network: NetworkConfig,
    pub sampling: SamplingSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub bias_variance: Option<BiasVarianceSection>,
    #[serde(default)]
    pub landscape: PlaneOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for sweeps and replicates; results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn invalid(path: String, message: impl Into<String>) -> CliError {
    CliError::Config {
        path,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            batch_size: self.sampling.batch_size,
            ensemble_size: self.network.ensemble_size,
            input_repetition_probability: self.sampling.input_repetition_probability,
            batch_repetitions: self.sampling.batch_repetitions,
            seed: self.sampling.seed,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        let mut opt = OptimizerConfig::with_step_decay(o.learning_rate, o.steps);
        if let Some(schedule) = &o.schedule {
            opt.schedule = schedule.clone();
        }
        opt.l1_coefficient = o.l1_coefficient;
        opt.l2_coefficient = o.l2_coefficient;
        opt.snapshot_every = o.snapshot_every;
        opt
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            data: self.data.clone(),
            network: self.network.clone(),
            sampling: self.sampling_config(),
            optimizer: self.optimizer_config(),
        }
    }

    /// Replaces every seed that drives training with ones derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.network.init_seed = derive_seed(seed, 0);
        self.sampling.seed = derive_seed(seed, 1);
        self.analysis.seed = derive_seed(seed, 2);
        if let Some(s) = &mut self.sweep {
            s.base_seed = seed;
        }
        if let Some(b) = &mut self.bias_variance {
            b.base_seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate().map_err(|e| match e {
            ModelError::InvalidConfig { field, reason } => invalid(format!("network.{field}"), reason),
            other => invalid("network".into(), other.to_string()),
        })?;
        self.sampling_config().validate().map_err(|e| match e {
            DataError::InvalidConfig { field, reason } => invalid(format!("sampling.{field}"), reason),
            other => invalid("sampling".into(), other.to_string()),
        })?;
        self.optimizer_config().validate().map_err(|e| match e {
            TrainError::InvalidConfig { field, reason } => invalid(format!("optimizer.{field}"), reason),
            other => invalid("optimizer".into(), other.to_string()),
        })?;
        if self.optimizer.steps == 0 {
            return Err(invalid("optimizer.steps".into(), "must be positive"));
        }
        if self.network.task != self.data.task() {
            return Err(invalid(
                "network.task".into(),
                format!("{:?} does not match the data source task {:?}", self.network.task, self.data.task()),
            ));
        }
        if let DataSource::Blobs { input_dim, classes, .. } = &self.data {
            if *input_dim != self.network.input_dim {
                return Err(invalid("network.input_dim".into(), format!("data has {input_dim} features")));
            }
            if *classes != self.network.output_dim {
                return Err(invalid("network.output_dim".into(), format!("data has {classes} classes")));
            }
        }
        if let DataSource::Regression { .. } = &self.data {
            if self.network.input_dim != 1 || self.network.output_dim != 1 {
                return Err(invalid("network".into(), "regression data needs input_dim = output_dim = 1"));
            }
        }
        if self.workers == 0 {
            return Err(invalid("workers".into(), "must be at least 1"));
        }
        let a = &self.analysis;
        if a.invariance_resamples == 0 {
            return Err(invalid("analysis.invariance_resamples".into(), "must be positive"));
        }
        if !(0.0..=1.0).contains(&a.dominance_threshold) {
            return Err(invalid("analysis.dominance_threshold".into(), "must lie in [0, 1]"));
        }
        if !(a.sparsity_threshold >= 0.0) {
            return Err(invalid("analysis.sparsity_threshold".into(), "must be non-negative"));
        }
        if let FixingPlan::Sampled { outer, inner, .. } = a.separation {
            if outer < 2 || inner.is_some_and(|k| k < 2) {
                return Err(invalid("analysis.separation".into(), "sample counts must be at least 2"));
            }
        }
        let l = &self.landscape;
        if l.resolution < 2 || !(l.margin >= 0.0) || l.max_examples == 0 {
            return Err(invalid(
                "landscape".into(),
                "resolution must be at least 2, margin non-negative, max_examples positive",
            ));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(invalid("sweep.values".into(), "needs at least one value"));
            }
            if s.replicates == 0 {
                return Err(invalid("sweep.replicates".into(), "must be at least 1"));
            }
            if s.ensemble_sizes.as_ref().is_some_and(|m| m.is_empty() || m.contains(&0)) {
                return Err(invalid("sweep.ensemble_sizes".into(), "must be a non-empty list of positive sizes"));
            }
            if s.axis == SweepAxis::EnsembleSize && s.ensemble_sizes.is_some() {
                return Err(invalid("sweep.ensemble_sizes".into(), "cannot be crossed with an M sweep"));
            }
        }
        if let Some(b) = &self.bias_variance {
            if b.ensemble_sizes.is_empty() || b.ensemble_sizes.contains(&0) {
                return Err(invalid("bias_variance.ensemble_sizes".into(), "must be a non-empty list of positive sizes"));
            }
            if b.replicates < 2 {
                return Err(invalid(
                    "bias_variance.replicates".into(),
                    format!("needs at least 2 replicates for a variance, got {}", b.replicates),
                ));
            }
        }
        Ok(())
    }

    /// Git-style content hash of the semantically meaningful fields:
    /// sha256 over `"blob <len>\0"` followed by key-sorted compact JSON.
    /// Output location and worker count are excluded.
    pub fn content_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
        }
        let canonical = serde_json::to_vec(&value).expect("value serializes");
        let mut hasher = Sha256::new();
        hasher.update(format!("blob {}\0", canonical.len()).as_bytes());
        hasher.update(&canonical);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
