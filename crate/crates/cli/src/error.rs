//! Error taxonomy for the CLI, mapped onto the documented exit codes:
//! 2 config, 3 data, 4 artifact, 5 divergence.

use hids_core::artifact::ArtifactError;
use hids_core::detect::DetectError;
use hids_core::forest::ForestError;
use hids_core::ingest::IngestError;
use hids_core::nn::NnError;
use hids_core::quant::QuantError;
use hids_core::svdd::TrainError;
use hids_core::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Artifact(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }

    /// Prefix the message with the failing stage.
    pub fn in_stage(self, stage: &str) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("{stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{stage}: {m}")),
            CliError::Artifact(m) => CliError::Artifact(format!("{stage}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(format!("{stage}: {m}")),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::BadFractions { .. } => CliError::Config(format!("split_dataset: {e}")),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergenceDetected { .. } => CliError::Divergence(e.to_string()),
            TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::BadArchitecture(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::BadParameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::ArtifactMismatch { .. } => CliError::Artifact(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        CliError::Artifact(e.to_string())
    }
}
