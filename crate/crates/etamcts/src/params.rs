//! All engine tunables in one place, plus the named parameter profiles.
//!
//! Branching bounds are depth-dependent: a depth map distinguishes the root
//! row (depth 0) from the `t > 0` row, with lookups beyond the configured
//! depths falling back to the latter.

use crate::critics::CriticWeights;
use crate::merge::MergePredicateConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("unknown profile '{0}'")]
    UnknownProfile(String),
}

/// Depth-indexed integer bound with a fallback row for unconfigured depths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthMap {
    #[serde(default)]
    pub by_depth: BTreeMap<u32, u32>,
    pub default: u32,
}

impl DepthMap {
    pub fn uniform(value: u32) -> Self {
        DepthMap {
            by_depth: BTreeMap::new(),
            default: value,
        }
    }

    /// Convenience for the common two-row shape: one value at depth 0, a
    /// fallback everywhere deeper.
    pub fn rooted(at_root: u32, deeper: u32) -> Self {
        let mut by_depth = BTreeMap::new();
        by_depth.insert(0, at_root);
        DepthMap {
            by_depth,
            default: deeper,
        }
    }

    pub fn get(&self, depth: usize) -> u32 {
        u32::try_from(depth)
            .ok()
            .and_then(|d| self.by_depth.get(&d).copied())
            .unwrap_or(self.default)
    }
}

/// Every tunable of the search engine and the surrounding loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchParams {
    /// Exploration constant C of the selection rule.
    pub exploration_c: f64,
    /// Importance-to-branching factor: a node may hold up to
    /// `max(c_min(d), min(floor(alpha * importance) + 1, c_max(d)))` children.
    pub alpha: f64,
    pub c_min: DepthMap,
    pub c_max: DepthMap,
    /// Weights of the value, process-reward, and outcome-reward terms.
    pub weights: CriticWeights,
    /// Fast rollouts drawn per simulation for the outcome term.
    pub fast_rollout_count: u32,
    /// Expansion budget: the search stops after this many node creations.
    pub rollout_budget: u64,
    pub merge: MergePredicateConfig,
    /// Disables state merge entirely when false (ablation switch).
    pub merge_enabled: bool,
    /// When false, every node gets a fixed width of `c_max(depth)` children
    /// (ablation switch).
    pub adaptive_branching: bool,
    /// Id of the termination rule used to cut options.
    pub termination_rule: String,
    /// Quality threshold gamma for the self-improvement filter.
    pub filter_threshold: f64,
    /// Sampling temperature during expansion. Not pinned by any reference
    /// setting; 0.8 is this crate's default.
    pub expansion_temperature: f64,
    /// Token cap per generated option.
    pub max_option_tokens: u32,
    /// Upper bound on concurrent fast-rollout evaluations per simulation.
    pub simulation_parallelism: u32,
    /// The iteration loop stops after this many consecutive iterations
    /// without a node creation (everything merged or terminal).
    pub stall_limit: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        // The "gsm8k-small" profile.
        SearchParams::profile("gsm8k-small").expect("builtin profile")
    }
}

/// Names of the built-in parameter profiles.
pub const PROFILE_NAMES: [&str; 4] = ["gsm8k-small", "gsm8k-large", "math-small", "math-large"];

impl SearchParams {
    fn base(
        exploration_c: f64,
        c_min: DepthMap,
        c_max: DepthMap,
        termination_rule: &str,
    ) -> Self {
        SearchParams {
            exploration_c,
            alpha: 1.0,
            c_min,
            c_max,
            weights: CriticWeights::default(),
            fast_rollout_count: 4,
            rollout_budget: 200,
            merge: MergePredicateConfig::default(),
            merge_enabled: true,
            adaptive_branching: true,
            termination_rule: termination_rule.to_string(),
            filter_threshold: 0.5,
            expansion_temperature: 0.8,
            max_option_tokens: 256,
            simulation_parallelism: 1,
            stall_limit: 256,
        }
    }

    /// Loads one of the built-in profiles by name.
    pub fn profile(name: &str) -> Result<Self, ParamsError> {
        let cmax = DepthMap::rooted(60, 10);
        match name {
            "gsm8k-small" => Ok(Self::base(1.0, DepthMap::rooted(10, 2), cmax, "newline")),
            "gsm8k-large" => Ok(Self::base(1.5, DepthMap::rooted(40, 2), cmax, "newline")),
            "math-small" => Ok(Self::base(1.0, DepthMap::rooted(10, 3), cmax, "formula")),
            "math-large" => Ok(Self::base(1.0, DepthMap::rooted(20, 3), cmax, "formula")),
            other => Err(ParamsError::UnknownProfile(other.to_string())),
        }
    }

    /// Small bounds suited to the toy arithmetic domain, where only a
    /// handful of distinct options exist per state. The `c_min` floor sits
    /// at the op-pool size so the adaptive width never hides a legal step,
    /// while `c_max` leaves fixed-width search room to waste. Exploration
    /// is scaled to the 0..=3 range of the three-critic score. Byte-identical
    /// options merge (threshold 0); distinct toy steps never do.
    pub fn toy_default() -> Self {
        let mut p = Self::base(
            2.5,
            DepthMap::rooted(5, 4),
            DepthMap::rooted(8, 6),
            "newline",
        );
        p.alpha = 4.0;
        p.merge = MergePredicateConfig::EditDistance { threshold: 0 };
        p
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        let err = |msg: String| Err(ParamsError::Invalid(msg));
        if self.exploration_c.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || !self.exploration_c.is_finite()
        {
            return err(format!("exploration_c must be > 0, got {}", self.exploration_c));
        }
        if self.alpha.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || !self.alpha.is_finite()
        {
            return err(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.fast_rollout_count == 0 {
            return err("fast_rollout_count must be >= 1".to_string());
        }
        if self.rollout_budget == 0 {
            return err("rollout_budget must be >= 1".to_string());
        }
        if self.max_option_tokens == 0 {
            return err("max_option_tokens must be >= 1".to_string());
        }
        if self.simulation_parallelism == 0 {
            return err("simulation_parallelism must be >= 1".to_string());
        }
        if self.expansion_temperature < 0.0 {
            return err("expansion_temperature must be >= 0".to_string());
        }
        self.weights.validate().map_err(ParamsError::Invalid)?;
        self.merge.validate().map_err(ParamsError::Invalid)?;
        // c_min(d) <= c_max(d) over every configured depth plus the fallback.
        let depths: Vec<u32> = self
            .c_min
            .by_depth
            .keys()
            .chain(self.c_max.by_depth.keys())
            .copied()
            .collect();
        for d in depths {
            if self.c_min.get(d as usize) > self.c_max.get(d as usize) {
                return err(format!(
                    "c_min({d}) = {} exceeds c_max({d}) = {}",
                    self.c_min.get(d as usize),
                    self.c_max.get(d as usize)
                ));
            }
        }
        if self.c_min.default > self.c_max.default {
            return err(format!(
                "fallback c_min {} exceeds fallback c_max {}",
                self.c_min.default, self.c_max.default
            ));
        }
        Ok(())
    }
}
