//! The TOML run configuration: one file holds every knob a run needs.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tagrl_core::pipeline::PipelineConfig;
use tagrl_core::prmu::PrmuTrainConfig;
use tagrl_core::synth::EnvConfig;
use tagrl_core::tag_grammar::TagRegistry;
use tagrl_core::{
    FormatConfig, GspoConfig, RepetitionConfig, RewardContext, RewardWeights, SftConfig, SynthEnv,
};

use crate::error::CliError;

/// Tag registry as configuration: names plus the minimum span count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistryConfig {
    pub names: Vec<String>,
    pub min_tag_count: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        let default = TagRegistry::default();
        Self { names: default.names().to_vec(), min_tag_count: default.min_tag_count() }
    }
}

impl RegistryConfig {
    pub fn build(&self) -> Result<TagRegistry, CliError> {
        Ok(TagRegistry::new(self.names.iter().map(String::as_str), self.min_tag_count)?)
    }
}

/// Preference-model training section: dataset sizes plus optimizer knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmuSection {
    pub feature_dim: usize,
    pub prp_pairs: usize,
    pub pqp_pairs: usize,
    pub init_seed: u64,
    pub train: PrmuTrainConfig,
}

impl Default for PrmuSection {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            prp_pairs: 300,
            pqp_pairs: 300,
            init_seed: 3,
            train: PrmuTrainConfig::default(),
        }
    }
}

/// Supervised warm-start section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    /// Oracle-generated tagged chains to imitate.
    pub examples: usize,
    pub train: SftConfig,
}

impl Default for SftSection {
    fn default() -> Self {
        Self { examples: 500, train: SftConfig::default() }
    }
}

/// Held-out evaluation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tasks: usize,
    pub seed: u64,
    /// Decoding budget per response.
    pub max_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: 400, seed: 101, max_len: 24 }
    }
}

/// Everything one invocation needs, loadable from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub registry: RegistryConfig,
    pub weights: RewardWeights,
    pub repetition: RepetitionConfig,
    pub format: FormatConfig,
    pub prmu: PrmuSection,
    pub sft: SftSection,
    /// Stage-one optimization (composite reward).
    pub guided: GspoConfig,
    /// Stage-two optimization (foundation reward only).
    pub explore: GspoConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            env: EnvConfig::default(),
            registry: RegistryConfig::default(),
            weights: RewardWeights::default(),
            repetition: RepetitionConfig::default(),
            format: FormatConfig::default(),
            prmu: PrmuSection::default(),
            sft: SftSection::default(),
            guided: GspoConfig::default(),
            explore: GspoConfig { epochs: 1, ..GspoConfig::default() },
            pipeline: PipelineConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.env.validate()?;
        self.registry.build()?;
        self.guided
            .validate()
            .map_err(|e| CliError::Usage(format!("guided section: {e}")))?;
        self.explore
            .validate()
            .map_err(|e| CliError::Usage(format!("explore section: {e}")))?;
        self.pipeline
            .validate()
            .map_err(|e| CliError::Usage(format!("pipeline section: {e}")))?;
        let positive = [
            ("prmu.feature_dim", self.prmu.feature_dim),
            ("prmu.prp_pairs", self.prmu.prp_pairs),
            ("prmu.pqp_pairs", self.prmu.pqp_pairs),
            ("sft.examples", self.sft.examples),
            ("eval.tasks", self.eval.tasks),
            ("eval.max_len", self.eval.max_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        for (name, value) in
            [("weights.alpha", self.weights.alpha), ("weights.beta", self.weights.beta), ("weights.gamma", self.weights.gamma)]
        {
            if !value.is_finite() {
                return Err(CliError::Usage(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn reward_context(&self) -> Result<RewardContext, CliError> {
        Ok(RewardContext {
            weights: self.weights,
            repetition: self.repetition,
            format: self.format.clone(),
            registry: self.registry.build()?,
        })
    }

    pub fn environment(&self) -> Result<SynthEnv, CliError> {
        Ok(SynthEnv::generate(self.env.clone())?)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
