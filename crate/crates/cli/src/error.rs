use std::path::PathBuf;

use genda::ad::AdError;
use genda::baseline_lcsvd::SvdError;
use genda::diffusion::DiffusionError;
use genda::experiment::ExperimentError;
use genda::gnn::GnnError;
use genda::mesh::MeshError;
use genda::metrics::MetricError;
use genda::sensors::SensorError;
use genda::synthdata::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Experiment(ExperimentError::Config(_)) => "config",
            CliError::Experiment(ExperimentError::Io { .. }) => "io",
            CliError::Experiment(_) => "experiment",
            CliError::Mesh(_) => "mesh",
            CliError::Synth(_) => "data",
            CliError::Sensor(_) => "sensors",
            CliError::Svd(_) => "baseline",
            CliError::Metric(_) => "metrics",
            CliError::Diffusion(_) => "diffusion",
            CliError::Gnn(_) => "model",
            CliError::Ad(_) => "checkpoint",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
