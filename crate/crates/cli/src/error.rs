use thiserror::Error;

use causalseg::evalbench::BenchError;
use causalseg::metrics::MetricsError;
use causalseg::model::{ModelError, SnapshotError};
use causalseg::reasoner::ReasonerError;
use causalseg::synthgen::SynthError;
use causalseg::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    /// A required path that does not exist, reported against its flag.
    pub fn missing(flag: &str, path: &std::path::Path) -> Self {
        CliError::Config(format!("{flag}: {} does not exist", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::PoolTooSmall(_) | ModelError::ImageSize { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) | SynthError::Json(_) | SynthError::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Toml(_) | TrainError::Mismatch { .. } => CliError::Config(e.to_string()),
            TrainError::Io(_) | TrainError::Snapshot(_) => CliError::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Train(t) => t.into(),
            BenchError::Model(m) => m.into(),
            BenchError::Synth(s) => s.into(),
            BenchError::Config(_) => CliError::Config(e.to_string()),
            BenchError::Io(_) | BenchError::Json(_) | BenchError::Csv(_) | BenchError::Snapshot(_) => {
                CliError::Io(e.to_string())
            }
            BenchError::Metrics(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<ReasonerError> for CliError {
    fn from(e: ReasonerError) -> Self {
        match e {
            ReasonerError::TooFewPairs { .. } | ReasonerError::InvalidCommand { .. } => CliError::Config(e.to_string()),
            ReasonerError::Io(_) | ReasonerError::Json(_) | ReasonerError::Container(_) => CliError::Io(e.to_string()),
            ReasonerError::Model(m) => m.into(),
            ReasonerError::Synth(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}
