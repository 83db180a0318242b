//! Error type carrying the process exit-code contract: 2 for usage and
//! configuration problems, 3 for a missing prerequisite artifact, 4 for
//! runtime failures (io, remote clients, numerics).

use tagrl_core::pipeline::PipelineError;
use tagrl_core::prmu::PrmuError;
use tagrl_core::synth::EnvError;
use tagrl_core::tag_grammar::GrammarError;
use tagrl_core::PolicyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<EnvError> for CliError {
    fn from(err: EnvError) -> Self {
        match err {
            EnvError::InvalidConfig(_) => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<GrammarError> for CliError {
    fn from(err: GrammarError) -> Self {
        CliError::Usage(format!("invalid tag registry: {err}"))
    }
}

impl From<PolicyError> for CliError {
    fn from(err: PolicyError) -> Self {
        match err {
            PolicyError::InvalidConfig(_) => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PrmuError> for CliError {
    fn from(err: PrmuError) -> Self {
        CliError::Runtime(err.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(err: PipelineError) -> Self {
        match err {
            PipelineError::InvalidConfig(_) => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(format!("io failure: {err}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Runtime(format!("serialization failure: {err}"))
    }
}
