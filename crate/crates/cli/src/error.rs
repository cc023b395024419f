use std::path::PathBuf;

use mimo_core::analysis::AnalysisError;
use mimo_core::data::DataError;
use mimo_core::experiment::ExperimentError;
use mimo_core::landscape::LandscapeError;
use mimo_core::model::ModelError;
use mimo_core::training::{CheckpointError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } | CliError::Input(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::InvalidConfig { field, reason } => CliError::Config {
            path: format!("data.{field}"),
            message: reason,
        },
        other => CliError::Input(other.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } | TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
        TrainError::Data(d) => data_error(d),
        TrainError::Model(m) => m.into(),
        TrainError::InvalidConfig { .. } => CliError::Usage(e.to_string()),
        TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        data_error(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        train_error(e)
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        let mut root = &e;
        while let ExperimentError::Replicate { source, .. } | ExperimentError::Cell { source, .. } = root {
            root = source;
        }
        match root {
            ExperimentError::Data(DataError::InvalidConfig { .. }) | ExperimentError::Data(DataError::Invalid(_)) => {
                CliError::Usage(e.to_string())
            }
            ExperimentError::Data(_) => CliError::Input(e.to_string()),
            ExperimentError::Pool(_) => CliError::Input(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Experiment(inner) => (*inner).into(),
            AnalysisError::Replicate { replicate, source } => {
                let wrapped = ExperimentError::Replicate { replicate, source };
                wrapped.into()
            }
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Model(m) => m.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<LandscapeError> for CliError {
    fn from(e: LandscapeError) -> Self {
        match e {
            LandscapeError::Model(m) => m.into(),
            LandscapeError::Analysis(a) => a.into(),
            LandscapeError::Csv(c) => CliError::Input(c.to_string()),
            LandscapeError::Degenerate(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
