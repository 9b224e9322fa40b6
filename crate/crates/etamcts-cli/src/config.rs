//! The run configuration: a single schema-validated JSON document. Unknown
//! keys are rejected everywhere, and the resolved effective configuration is
//! echoed into the run directory.

use crate::CliError;
use etamcts::backends::http::HttpBackendConfig;
use etamcts::backends::toy::InstanceSampler;
use etamcts::params::SearchParams;
use etamcts::selfimprove::EndpointSpec;
use etamcts::termination::TerminationSpec;
use etamcts::{CriticWeights, DepthMap};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Toy,
    Llm,
}

/// Toy-domain knobs: instance sampling and the optional value-critic noise
/// used for ablation studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub value_noise: f64,
    pub sampler: InstanceSampler,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            value_noise: 0.0,
            sampler: InstanceSampler::default(),
        }
    }
}

/// Endpoints for the llm domain: the large policy, the small fast-rollout
/// model, and optionally a separate critic endpoint (defaults to policy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub policy: HttpBackendConfig,
    pub fast_rollout: HttpBackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<HttpBackendConfig>,
}

fn default_prompts_per_round() -> usize {
    8
}
fn default_seed_instances() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfImproveConfig {
    /// Prompts synthesized per round.
    pub prompts_per_round: usize,
    /// Filter threshold; defaults to the params' filter_threshold.
    pub gamma: Option<f64>,
    /// Explicit seed prompts; required for the llm domain.
    pub seed_prompts: Vec<String>,
    /// Toy domain: number of seed instances sampled when none are given.
    pub seed_instances: usize,
    /// Policy swapped in after each round; omit to keep the current one.
    pub advance: Option<EndpointSpec>,
}

impl Default for SelfImproveConfig {
    fn default() -> Self {
        SelfImproveConfig {
            prompts_per_round: default_prompts_per_round(),
            gamma: None,
            seed_prompts: Vec::new(),
            seed_instances: default_seed_instances(),
            advance: None,
        }
    }
}

/// Partial override of [`SearchParams`], applied over the profile base.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsOverride {
    pub exploration_c: Option<f64>,
    pub alpha: Option<f64>,
    pub c_min: Option<DepthMap>,
    pub c_max: Option<DepthMap>,
    pub weights: Option<CriticWeights>,
    pub fast_rollout_count: Option<u32>,
    pub rollout_budget: Option<u64>,
    pub merge: Option<etamcts::merge::MergePredicateConfig>,
    pub merge_enabled: Option<bool>,
    pub adaptive_branching: Option<bool>,
    pub termination_rule: Option<String>,
    pub filter_threshold: Option<f64>,
    pub expansion_temperature: Option<f64>,
    pub max_option_tokens: Option<u32>,
    pub simulation_parallelism: Option<u32>,
    pub stall_limit: Option<u64>,
}

macro_rules! apply_overrides {
    ($self:ident, $base:ident; $($field:ident),+ $(,)?) => {
        $(if let Some(value) = $self.$field.clone() {
            $base.$field = value;
        })+
    };
}

impl ParamsOverride {
    pub fn apply(&self, base: &mut SearchParams) {
        apply_overrides!(self, base;
            exploration_c, alpha, c_min, c_max, weights, fast_rollout_count,
            rollout_budget, merge, merge_enabled, adaptive_branching,
            termination_rule, filter_threshold, expansion_temperature,
            max_option_tokens, simulation_parallelism, stall_limit,
        );
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default)]
    pub params: ParamsOverride,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends: Option<BackendsConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub termination: Vec<TerminationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesizer: Option<String>,
    #[serde(default)]
    pub self_improve: SelfImproveConfig,
}

impl RunConfig {
    /// A ready-to-run toy configuration, used when no file is given.
    pub fn default_toy() -> Self {
        RunConfig {
            domain: Domain::Toy,
            profile: None,
            params: ParamsOverride::default(),
            seed: 0,
            out_dir: None,
            toy: ToyConfig::default(),
            backends: None,
            termination: Vec::new(),
            templates_file: None,
            synthesizer: None,
            self_improve: SelfImproveConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!(
                "malformed config {} (line {}, column {}): {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.domain == Domain::Llm && self.backends.is_none() {
            return Err(CliError::Config(
                "llm domain requires a 'backends' section".to_string(),
            ));
        }
        if let Some(name) = &self.synthesizer {
            if !matches!(name.as_str(), "identity" | "toy-perturb" | "llm-rephrase") {
                return Err(CliError::Config(format!(
                    "unknown synthesizer '{name}' (expected identity, toy-perturb, or llm-rephrase)"
                )));
            }
        }
        if let Some(advance) = &self.self_improve.advance {
            let toy_advance = matches!(
                advance,
                EndpointSpec::ToyUniform { .. } | EndpointSpec::ToyGreedy { .. }
            );
            if self.domain == Domain::Llm && toy_advance {
                return Err(CliError::Config(
                    "llm domain cannot advance to a toy endpoint".to_string(),
                ));
            }
            if self.domain == Domain::Toy && !toy_advance {
                return Err(CliError::Config(
                    "toy domain cannot advance to an http endpoint".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Base profile -> config overrides -> command-line overrides.
    pub fn resolved_params(
        &self,
        profile_flag: Option<&str>,
        budget_flag: Option<u64>,
    ) -> Result<SearchParams, CliError> {
        let profile = profile_flag.or(self.profile.as_deref());
        let mut params = match profile {
            Some(name) => SearchParams::profile(name)
                .map_err(|e| CliError::Config(e.to_string()))?,
            None => match self.domain {
                Domain::Toy => SearchParams::toy_default(),
                Domain::Llm => SearchParams::default(),
            },
        };
        self.params.apply(&mut params);
        if let Some(budget) = budget_flag {
            params.rollout_budget = budget;
        }
        params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(params)
    }
}
