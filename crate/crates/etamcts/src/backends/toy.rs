//! The toy arithmetic domain: a desk-scale, exhaustively enumerable
//! sequence-generation task used to verify the engine against exact oracles.
//!
//! An instance asks for a path from `start` to `target` using a small set of
//! arithmetic ops within `max_depth` steps. The prompt is the instance's
//! canonical JSON; options are text lines `"apply <op>: <value>\n"`, and a
//! trajectory ends with the terminal line `"#### <value>"`. The reward is 1
//! iff the final answer equals the target. Under the uniform policy the
//! expected return of every state is exactly computable by enumeration,
//! which gives the toy critics their ground truth.

use crate::backends::{derive_seed, hash_text};
use crate::critics::{
    CriticBundle, CriticError, CriticWeights, OrmVerdict, OutcomeCritic, PrmVerdict,
    ProcessCritic, RewardOracle, ToolVerifier, ValueCritic,
};
use crate::policy::{FastRolloutPolicy, OptionGenerator, PolicyError};
use crate::termination::{TerminationRule, DEFAULT_TERMINAL_MARKER};
use crate::types::{OptionStep, PromptText, SearchState, Trajectory};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("prompt is not a toy instance: {0}")]
    Prompt(String),
    #[error("invalid toy instance: {0}")]
    Instance(String),
    #[error("state is not reachable in this instance: {0}")]
    Unreachable(String),
    #[error("state is already complete")]
    Complete,
}

impl From<ToyError> for PolicyError {
    fn from(e: ToyError) -> Self {
        PolicyError::Contract(e.to_string())
    }
}

impl From<ToyError> for CriticError {
    fn from(e: ToyError) -> Self {
        CriticError::Contract(e.to_string())
    }
}

/// One arithmetic operation, rendered as "+1", "-3", or "*2".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyOp {
    Add(i64),
    Mul(i64),
}

impl ToyOp {
    pub fn apply(&self, value: i64) -> i64 {
        match self {
            ToyOp::Add(n) => value.saturating_add(*n),
            ToyOp::Mul(n) => value.saturating_mul(*n),
        }
    }
}

impl fmt::Display for ToyOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyOp::Add(n) if *n >= 0 => write!(f, "+{n}"),
            ToyOp::Add(n) => write!(f, "{n}"),
            ToyOp::Mul(n) => write!(f, "*{n}"),
        }
    }
}

impl FromStr for ToyOp {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self, ToyError> {
        let err = || ToyError::Instance(format!("bad op '{s}'"));
        match s.as_bytes().first() {
            Some(b'*') => s[1..].parse().map(ToyOp::Mul).map_err(|_| err()),
            Some(b'+') => s[1..].parse().map(ToyOp::Add).map_err(|_| err()),
            Some(b'-') => s.parse().map(ToyOp::Add).map_err(|_| err()),
            _ => Err(err()),
        }
    }
}

impl Serialize for ToyOp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ToyOp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A toy task: reach `target` from `start` within `max_depth` op steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyInstance {
    pub start: i64,
    pub target: i64,
    pub ops: Vec<ToyOp>,
    pub max_depth: u32,
}

impl ToyInstance {
    /// The canonical prompt: the instance's compact JSON form.
    pub fn prompt(&self) -> PromptText {
        PromptText::new(serde_json::to_string(self).expect("instance serializes"))
            .expect("non-empty")
    }

    pub fn parse_prompt(prompt: &PromptText) -> Result<ToyInstance, ToyError> {
        serde_json::from_str(prompt.as_str()).map_err(|e| ToyError::Prompt(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.ops.is_empty() {
            return Err(ToyError::Instance("ops must be non-empty".to_string()));
        }
        if self.max_depth == 0 || self.max_depth > 6 {
            return Err(ToyError::Instance(format!(
                "max_depth must be in 1..=6, got {}",
                self.max_depth
            )));
        }
        Ok(())
    }
}

fn op_line(op: ToyOp, new_value: i64) -> String {
    format!("apply {op}: {new_value}\n")
}

fn terminal_line(value: i64) -> String {
    format!("{DEFAULT_TERMINAL_MARKER} {value}")
}

/// What a toy state's option lines encode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyStateView {
    pub value: i64,
    pub steps: u32,
    pub complete: bool,
    pub answer: Option<i64>,
}

/// Parses and validates a state's options against the instance rules.
pub fn view_state(instance: &ToyInstance, state: &SearchState) -> Result<ToyStateView, ToyError> {
    let mut view = ToyStateView {
        value: instance.start,
        steps: 0,
        complete: false,
        answer: None,
    };
    for option in state.options() {
        if view.complete {
            return Err(ToyError::Unreachable(
                "options continue past the terminal line".to_string(),
            ));
        }
        let text = &option.text;
        if let Some(rest) = text.strip_prefix(DEFAULT_TERMINAL_MARKER) {
            let answer: i64 = rest.trim().parse().map_err(|_| {
                ToyError::Unreachable(format!("bad terminal line '{}'", text.escape_debug()))
            })?;
            if answer != view.value {
                return Err(ToyError::Unreachable(format!(
                    "terminal line claims {answer} but the value is {}",
                    view.value
                )));
            }
            view.complete = true;
            view.answer = Some(answer);
        } else {
            let body = text
                .strip_prefix("apply ")
                .and_then(|t| t.strip_suffix('\n'))
                .ok_or_else(|| {
                    ToyError::Unreachable(format!("bad option line '{}'", text.escape_debug()))
                })?;
            let (op_text, value_text) = body.split_once(": ").ok_or_else(|| {
                ToyError::Unreachable(format!("bad option line '{}'", text.escape_debug()))
            })?;
            let op: ToyOp = op_text.parse().map_err(|_| {
                ToyError::Unreachable(format!("unknown op '{op_text}'"))
            })?;
            if !instance.ops.contains(&op) {
                return Err(ToyError::Unreachable(format!(
                    "op '{op}' is not allowed by the instance"
                )));
            }
            let claimed: i64 = value_text.parse().map_err(|_| {
                ToyError::Unreachable(format!("bad value '{value_text}'"))
            })?;
            let actual = op.apply(view.value);
            if claimed != actual {
                return Err(ToyError::Unreachable(format!(
                    "line claims {claimed} but {op} gives {actual}"
                )));
            }
            view.value = actual;
            view.steps += 1;
        }
    }
    Ok(view)
}

/// The finite set of legal next options from a non-complete state, in a
/// stable order. A state at the target (or out of op budget) is forced into
/// its single terminal option.
pub fn next_options(instance: &ToyInstance, view: &ToyStateView) -> Vec<OptionStep> {
    if view.complete {
        return Vec::new();
    }
    if view.value == instance.target || view.steps >= instance.max_depth {
        return vec![OptionStep {
            text: terminal_line(view.value),
            boundary: "newline".to_string(),
            is_terminal: true,
        }];
    }
    instance
        .ops
        .iter()
        .map(|op| OptionStep {
            text: op_line(*op, op.apply(view.value)),
            boundary: "newline".to_string(),
            is_terminal: false,
        })
        .collect()
}

/// Samples one legal next option, seeded. Deterministic per (state, seed).
pub fn toy_generate(
    instance: &ToyInstance,
    state: &SearchState,
    seed: u64,
) -> Result<OptionStep, ToyError> {
    let view = view_state(instance, state)?;
    if view.complete {
        return Err(ToyError::Complete);
    }
    let mut options = next_options(instance, &view);
    if options.len() == 1 {
        return Ok(options.remove(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = rng.random_range(0..options.len());
    Ok(options.remove(index))
}

/// Exact value table for one instance: for every reachable (value, steps)
/// pair, the probability that a uniform-random continuation reaches the
/// target. Computed once by full enumeration with memoization.
#[derive(Clone, Debug)]
pub struct ToyOracle {
    instance: ToyInstance,
    values: HashMap<(i64, u32), f64>,
}

impl ToyOracle {
    pub fn new(instance: ToyInstance) -> Result<Self, ToyError> {
        instance.validate()?;
        let mut values = HashMap::new();
        enumerate_value(&instance, instance.start, 0, &mut values);
        Ok(ToyOracle { instance, values })
    }

    pub fn instance(&self) -> &ToyInstance {
        &self.instance
    }

    /// Expected return of a reachable incomplete (value, steps) pair.
    pub fn value_of(&self, value: i64, steps: u32) -> Result<f64, ToyError> {
        self.values
            .get(&(value, steps))
            .copied()
            .ok_or_else(|| ToyError::Unreachable(format!("({value}, {steps})")))
    }

    /// Expected return of a state; a complete state scores its own reward.
    pub fn state_value(&self, state: &SearchState) -> Result<f64, ToyError> {
        let view = view_state(&self.instance, state)?;
        if view.complete {
            return Ok(f64::from(view.answer == Some(self.instance.target)));
        }
        self.value_of(view.value, view.steps)
    }

    /// Reward of a trajectory: 1 iff it terminates with the target answer.
    pub fn trajectory_reward(&self, trajectory: &Trajectory) -> Result<f64, ToyError> {
        if !trajectory.terminal {
            return Ok(0.0);
        }
        let view = view_state(&self.instance, &trajectory.final_state())?;
        Ok(f64::from(view.complete && view.answer == Some(self.instance.target)))
    }

    /// Minimum number of op steps to reach the target, when reachable.
    pub fn min_solution_steps(&self) -> Option<u32> {
        reach_depths(&self.instance).get(&self.instance.target).copied()
    }

    /// The unique best reward over all trajectories (1 when solvable).
    pub fn optimal_reward(&self) -> f64 {
        f64::from(self.min_solution_steps().is_some())
    }
}

fn enumerate_value(
    instance: &ToyInstance,
    value: i64,
    steps: u32,
    memo: &mut HashMap<(i64, u32), f64>,
) -> f64 {
    if let Some(v) = memo.get(&(value, steps)) {
        return *v;
    }
    let result = if value == instance.target {
        1.0
    } else if steps >= instance.max_depth {
        0.0
    } else {
        let sum: f64 = instance
            .ops
            .iter()
            .map(|op| enumerate_value(instance, op.apply(value), steps + 1, memo))
            .sum();
        sum / instance.ops.len() as f64
    };
    memo.insert((value, steps), result);
    result
}

/// Minimum depth at which each value first becomes reachable. When
/// `absorbing` is set, continuation stops there (only the terminal option
/// follows the target); a value's own first-visit depth is unaffected by
/// its absorption, so sampling passes `None`.
fn reach_depths_from(
    start: i64,
    ops: &[ToyOp],
    max_depth: u32,
    absorbing: Option<i64>,
) -> BTreeMap<i64, u32> {
    let mut depths = BTreeMap::new();
    depths.insert(start, 0);
    let mut frontier = vec![start];
    for depth in 1..=max_depth {
        let mut next = Vec::new();
        for value in frontier {
            if absorbing == Some(value) {
                continue;
            }
            for op in ops {
                let reached = op.apply(value);
                if let std::collections::btree_map::Entry::Vacant(e) = depths.entry(reached) {
                    e.insert(depth);
                    next.push(reached);
                }
            }
        }
        frontier = next;
    }
    depths
}

fn reach_depths(instance: &ToyInstance) -> BTreeMap<i64, u32> {
    reach_depths_from(
        instance.start,
        &instance.ops,
        instance.max_depth,
        Some(instance.target),
    )
}

/// Spec-level convenience: the exact expected return of one state.
pub fn toy_oracle_value(instance: &ToyInstance, state: &SearchState) -> Result<f64, ToyError> {
    ToyOracle::new(instance.clone())?.state_value(state)
}

/// Shared per-prompt oracle cache so every toy component enumerates each
/// instance once.
#[derive(Default)]
pub struct OracleCache {
    map: Mutex<HashMap<String, Arc<ToyOracle>>>,
}

impl OracleCache {
    pub fn oracle_for(&self, prompt: &PromptText) -> Result<Arc<ToyOracle>, ToyError> {
        let mut map = self.map.lock().expect("oracle cache lock");
        if let Some(oracle) = map.get(prompt.as_str()) {
            return Ok(oracle.clone());
        }
        let instance = ToyInstance::parse_prompt(prompt)?;
        let oracle = Arc::new(ToyOracle::new(instance)?);
        map.insert(prompt.as_str().to_string(), oracle.clone());
        Ok(oracle)
    }
}

/// Factory wiring every toy component to one seed and one oracle cache.
#[derive(Clone)]
pub struct ToyBackend {
    cache: Arc<OracleCache>,
    seed: u64,
    value_noise: f64,
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        ToyBackend {
            cache: Arc::new(OracleCache::default()),
            seed,
            value_noise: 0.0,
        }
    }

    /// Degrades the value critic with deterministic state-keyed noise of the
    /// given amplitude. The exact oracle stays available to the other
    /// critics; this models an imperfect learned value function for
    /// ablation studies.
    pub fn with_value_noise(mut self, amplitude: f64) -> Self {
        self.value_noise = amplitude;
        self
    }

    pub fn generator(&self) -> ToyGenerator {
        ToyGenerator {
            cache: self.cache.clone(),
            seed: derive_seed(self.seed, "generator", 0),
            counter: Mutex::new(0),
        }
    }

    /// A policy stub that always takes the oracle-best step; stands in for
    /// an improved policy in self-improvement tests.
    pub fn greedy_generator(&self) -> ToyGreedyGenerator {
        ToyGreedyGenerator {
            cache: self.cache.clone(),
        }
    }

    pub fn fast_rollout_policy(&self) -> ToyFastRollout {
        ToyFastRollout {
            cache: self.cache.clone(),
            seed: derive_seed(self.seed, "fast-rollout", 0),
            counter: Mutex::new(0),
        }
    }

    pub fn value_critic(&self) -> ToyValueCritic {
        ToyValueCritic {
            cache: self.cache.clone(),
            noise: (self.value_noise > 0.0)
                .then(|| (derive_seed(self.seed, "value-noise", 0), self.value_noise)),
        }
    }

    pub fn process_critic(&self) -> ToyPrm {
        ToyPrm {
            cache: self.cache.clone(),
        }
    }

    pub fn outcome_critic(&self) -> ToyOrm {
        ToyOrm {
            cache: self.cache.clone(),
        }
    }

    pub fn critic_bundle(&self, weights: CriticWeights) -> Result<CriticBundle, CriticError> {
        CriticBundle::new(
            Arc::new(self.value_critic()),
            Arc::new(self.process_critic()),
            Arc::new(self.outcome_critic()),
            weights,
        )
    }

    pub fn reward_oracle(&self) -> ToyRewardOracle {
        ToyRewardOracle {
            cache: self.cache.clone(),
        }
    }

    pub fn tool_verifier(&self) -> ToyToolVerifier {
        ToyToolVerifier {
            cache: self.cache.clone(),
        }
    }
}

/// Uniform sampler over the legal next steps. Temperature 0 picks the first
/// option in the stable enumeration order.
pub struct ToyGenerator {
    cache: Arc<OracleCache>,
    seed: u64,
    counter: Mutex<u64>,
}

impl OptionGenerator for ToyGenerator {
    fn generate(
        &self,
        state: &SearchState,
        temperature: f64,
        rule: &TerminationRule,
        _max_tokens: u32,
    ) -> Result<OptionStep, PolicyError> {
        let oracle = self.cache.oracle_for(state.prompt())?;
        let mut option = if temperature == 0.0 {
            let view = view_state(oracle.instance(), state)?;
            let mut options = next_options(oracle.instance(), &view);
            if options.is_empty() {
                return Err(ToyError::Complete.into());
            }
            options.remove(0)
        } else {
            let call = {
                let mut counter = self.counter.lock().expect("counter lock");
                *counter += 1;
                *counter
            };
            toy_generate(oracle.instance(), state, derive_seed(self.seed, "call", call))?
        };
        option.boundary = rule.id().to_string();
        Ok(option)
    }
}

/// Deterministic oracle-greedy policy: argmax child value, first on ties.
pub struct ToyGreedyGenerator {
    cache: Arc<OracleCache>,
}

impl OptionGenerator for ToyGreedyGenerator {
    fn generate(
        &self,
        state: &SearchState,
        _temperature: f64,
        rule: &TerminationRule,
        _max_tokens: u32,
    ) -> Result<OptionStep, PolicyError> {
        let oracle = self.cache.oracle_for(state.prompt())?;
        let view = view_state(oracle.instance(), state)?;
        let options = next_options(oracle.instance(), &view);
        if options.is_empty() {
            return Err(ToyError::Complete.into());
        }
        let mut best: Option<(f64, OptionStep)> = None;
        for option in options {
            let child = state.child(option.clone());
            let value = oracle.state_value(&child)?;
            if best.as_ref().is_none_or(|(v, _)| value > *v) {
                best = Some((value, option));
            }
        }
        let (_, mut option) = best.expect("at least one option");
        option.boundary = rule.id().to_string();
        Ok(option)
    }
}

/// Uniform-random completion to a terminal line.
pub struct ToyFastRollout {
    cache: Arc<OracleCache>,
    seed: u64,
    counter: Mutex<u64>,
}

impl FastRolloutPolicy for ToyFastRollout {
    fn rollout(&self, state: &SearchState) -> Result<Trajectory, PolicyError> {
        let oracle = self.cache.oracle_for(state.prompt())?;
        let mut current = state.clone();
        while !current.is_terminal() {
            let call = {
                let mut counter = self.counter.lock().expect("counter lock");
                *counter += 1;
                *counter
            };
            let option =
                toy_generate(oracle.instance(), &current, derive_seed(self.seed, "step", call))?;
            current = current.child(option);
        }
        Ok(Trajectory {
            prompt: state.prompt().clone(),
            options: current.options().to_vec(),
            terminal: true,
            critic_score: None,
            final_reward: None,
        })
    }
}

/// Exact oracle value, optionally degraded by state-keyed noise.
pub struct ToyValueCritic {
    cache: Arc<OracleCache>,
    noise: Option<(u64, f64)>,
}

impl ValueCritic for ToyValueCritic {
    fn value(&self, state: &SearchState) -> Result<f64, CriticError> {
        let oracle = self.cache.oracle_for(state.prompt())?;
        let exact = oracle.state_value(state)?;
        match self.noise {
            None => Ok(exact),
            Some((seed, amplitude)) => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, "state", hash_text(state.rendered())));
                let jitter = rng.random_range(-amplitude..=amplitude);
                Ok((exact + jitter).clamp(0.0, 1.0))
            }
        }
    }
}

/// Step judge: a step is correct iff the target stays reachable after it.
pub struct ToyPrm {
    cache: Arc<OracleCache>,
}

impl ProcessCritic for ToyPrm {
    fn assess(&self, state: &SearchState, option: &OptionStep) -> Result<PrmVerdict, CriticError> {
        let oracle = self.cache.oracle_for(state.prompt())?;
        let child = state.child(option.clone());
        let good = oracle.state_value(&child)? > 0.0;
        Ok(PrmVerdict {
            raw_text: if good { "True" } else { "False" }.to_string(),
            scalar: f64::from(good),
            parse_warning: false,
        })
    }
}

/// Outcome judge backed by the exact answer check (a built-in tool).
pub struct ToyOrm {
    cache: Arc<OracleCache>,
}

impl OutcomeCritic for ToyOrm {
    fn assess(
        &self,
        prompt: &PromptText,
        trajectory: &Trajectory,
    ) -> Result<OrmVerdict, CriticError> {
        let oracle = self.cache.oracle_for(prompt)?;
        let reward = oracle.trajectory_reward(trajectory)?;
        Ok(OrmVerdict {
            raw_text: if reward > 0.5 { "True" } else { "False" }.to_string(),
            scalar: reward,
            tool_checked: true,
            parse_warning: false,
        })
    }
}

/// Ground-truth reward for toy trajectories.
pub struct ToyRewardOracle {
    cache: Arc<OracleCache>,
}

impl RewardOracle for ToyRewardOracle {
    fn final_reward(&self, trajectory: &Trajectory) -> Result<f64, CriticError> {
        let oracle = self.cache.oracle_for(&trajectory.prompt)?;
        Ok(oracle.trajectory_reward(trajectory)?)
    }
}

/// Tool verifier comparing the marker answer against the instance target.
pub struct ToyToolVerifier {
    cache: Arc<OracleCache>,
}

impl ToolVerifier for ToyToolVerifier {
    fn verify(&self, prompt: &PromptText, trajectory: &Trajectory) -> Result<bool, CriticError> {
        let oracle = self.cache.oracle_for(prompt)?;
        let answer =
            crate::policy::extract_marker_answer(&trajectory.rendered_options(), DEFAULT_TERMINAL_MARKER)
                .ok_or_else(|| CriticError::Tool("trajectory exposes no final answer".to_string()))?;
        Ok(answer == oracle.instance().target.to_string())
    }
}

/// Perturbs an instance into a variant with a different (still reachable)
/// target, keeping start, ops, and depth. Returns the instance unchanged
/// when no alternative target exists.
pub fn perturb_instance(instance: &ToyInstance, seed: u64) -> ToyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depths = reach_depths_from(instance.start, &instance.ops, instance.max_depth, None);
    let candidates: Vec<i64> = depths
        .iter()
        .filter(|(v, d)| **d >= 1 && **v != instance.target)
        .map(|(v, _)| *v)
        .collect();
    if candidates.is_empty() {
        return instance.clone();
    }
    ToyInstance {
        target: candidates[rng.random_range(0..candidates.len())],
        ..instance.clone()
    }
}

/// Seeded generator of solvable toy instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSampler {
    pub ops_pool: Vec<ToyOp>,
    pub min_ops: usize,
    pub max_ops: usize,
    pub min_depth: u32,
    pub max_depth: u32,
    pub start_range: (i64, i64),
    /// Prefer targets whose shortest solution needs at least this many steps.
    pub min_solution_steps: u32,
}

impl Default for InstanceSampler {
    fn default() -> Self {
        InstanceSampler {
            ops_pool: vec![
                ToyOp::Add(1),
                ToyOp::Add(2),
                ToyOp::Add(3),
                ToyOp::Add(-1),
                ToyOp::Add(-2),
                ToyOp::Add(-3),
                ToyOp::Mul(2),
                ToyOp::Mul(3),
            ],
            min_ops: 2,
            max_ops: 4,
            min_depth: 3,
            max_depth: 4,
            start_range: (1, 9),
            min_solution_steps: 2,
        }
    }
}

impl InstanceSampler {
    /// Samples an instance whose target is reachable within `max_depth`
    /// (verified by enumeration before returning).
    pub fn sample(&self, seed: u64) -> ToyInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let start = rng.random_range(self.start_range.0..=self.start_range.1);
            let op_count = rng.random_range(self.min_ops..=self.max_ops.min(self.ops_pool.len()));
            let mut pool = self.ops_pool.clone();
            let mut ops = Vec::with_capacity(op_count);
            for _ in 0..op_count {
                let at = rng.random_range(0..pool.len());
                ops.push(pool.remove(at));
            }
            let max_depth = rng.random_range(self.min_depth..=self.max_depth);
            let depths = reach_depths_from(start, &ops, max_depth, None);
            let preferred: Vec<i64> = depths
                .iter()
                .filter(|(v, d)| **d >= self.min_solution_steps && **v != start)
                .map(|(v, _)| *v)
                .collect();
            let fallback: Vec<i64> = depths
                .iter()
                .filter(|(v, d)| **d >= 1 && **v != start)
                .map(|(v, _)| *v)
                .collect();
            let candidates = if preferred.is_empty() { fallback } else { preferred };
            if candidates.is_empty() {
                continue;
            }
            let target = candidates[rng.random_range(0..candidates.len())];
            let solvable = ToyInstance {
                start,
                target,
                ops,
                max_depth,
            };
            debug_assert!(reach_depths(&solvable).contains_key(&target));
            return solvable;
        }
    }

    /// A deterministic batch of instances derived from one seed.
    pub fn sample_batch(&self, seed: u64, count: usize) -> Vec<ToyInstance> {
        (0..count)
            .map(|i| self.sample(derive_seed(seed, "instance", i as u64)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::render_state;

    fn state_of(instance: &ToyInstance, lines: &[(&str, bool)]) -> SearchState {
        let prompt = instance.prompt();
        let options: Vec<OptionStep> = lines
            .iter()
            .map(|(text, terminal)| OptionStep {
                text: text.to_string(),
                boundary: "newline".to_string(),
                is_terminal: *terminal,
            })
            .collect();
        render_state(&prompt, &options)
    }

    fn plus2() -> ToyInstance {
        ToyInstance {
            start: 2,
            target: 4,
            ops: vec![ToyOp::Add(2)],
            max_depth: 2,
        }
    }

    #[test]
    fn op_parse_render_roundtrip() {
        for op in [ToyOp::Add(1), ToyOp::Add(-3), ToyOp::Mul(2)] {
            let text = op.to_string();
            assert_eq!(text.parse::<ToyOp>().unwrap(), op);
        }
        assert!("x2".parse::<ToyOp>().is_err());
    }

    #[test]
    fn instance_serializes_with_expected_keys() {
        let instance = ToyInstance {
            start: 1,
            target: 8,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(2)],
            max_depth: 4,
        };
        let prompt = instance.prompt();
        assert_eq!(
            prompt.as_str(),
            r#"{"start":1,"target":8,"ops":["+1","*2"],"max_depth":4}"#
        );
        assert_eq!(ToyInstance::parse_prompt(&prompt).unwrap(), instance);
    }

    #[test]
    fn single_path_instance() {
        let instance = plus2();
        let root = state_of(&instance, &[]);
        let options = next_options(&instance, &view_state(&instance, &root).unwrap());
        assert_eq!(options.len(), 1);
        assert_eq!(options[0].text, "apply +2: 4\n");
        let mid = state_of(&instance, &[("apply +2: 4\n", false)]);
        let next = next_options(&instance, &view_state(&instance, &mid).unwrap());
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].text, "#### 4");
        assert!(next[0].is_terminal);
    }

    #[test]
    fn root_option_set_is_enumerable() {
        let instance = ToyInstance {
            start: 1,
            target: 8,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(2)],
            max_depth: 4,
        };
        let root = state_of(&instance, &[]);
        let view = view_state(&instance, &root).unwrap();
        assert_eq!(next_options(&instance, &view).len(), 2);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let instance = ToyInstance {
            start: 1,
            target: 8,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(2)],
            max_depth: 4,
        };
        let root = state_of(&instance, &[]);
        for seed in 0..20 {
            let a = toy_generate(&instance, &root, seed).unwrap();
            let b = toy_generate(&instance, &root, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oracle_hand_enumeration() {
        // From 1 with {+1, *2} and two steps left: paths +1+1, +1*2, *2+1,
        // *2*2 reach 3, 4, 3, 4 — half hit the target.
        let instance = ToyInstance {
            start: 1,
            target: 4,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(2)],
            max_depth: 2,
        };
        let oracle = ToyOracle::new(instance.clone()).unwrap();
        let root = state_of(&instance, &[]);
        assert!((oracle.state_value(&root).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_terminal_and_dead_end_values() {
        let instance = plus2();
        let done = state_of(&instance, &[("apply +2: 4\n", false), ("#### 4", true)]);
        let oracle = ToyOracle::new(instance.clone()).unwrap();
        assert_eq!(oracle.state_value(&done).unwrap(), 1.0);
        // start=2, target=3 with only +2 available: never reachable.
        let dead = ToyInstance {
            start: 2,
            target: 3,
            ops: vec![ToyOp::Add(2)],
            max_depth: 2,
        };
        let oracle = ToyOracle::new(dead.clone()).unwrap();
        let root = render_state(&dead.prompt(), &[]);
        assert_eq!(oracle.state_value(&root).unwrap(), 0.0);
        assert_eq!(oracle.optimal_reward(), 0.0);
    }

    #[test]
    fn oracle_satisfies_bellman_consistency() {
        let instance = ToyInstance {
            start: 1,
            target: 10,
            ops: vec![ToyOp::Add(1), ToyOp::Add(3), ToyOp::Mul(2)],
            max_depth: 4,
        };
        let oracle = ToyOracle::new(instance.clone()).unwrap();
        for ((value, steps), v) in &oracle.values {
            if *value == instance.target || *steps >= instance.max_depth {
                continue;
            }
            let mean: f64 = instance
                .ops
                .iter()
                .map(|op| oracle.value_of(op.apply(*value), steps + 1).unwrap())
                .sum::<f64>()
                / instance.ops.len() as f64;
            assert!(
                (v - mean).abs() < 1e-12,
                "Bellman violated at ({value}, {steps})"
            );
        }
    }

    #[test]
    fn unreachable_state_is_rejected() {
        let instance = plus2();
        let forged = state_of(&instance, &[("apply +2: 7\n", false)]);
        assert!(matches!(
            toy_oracle_value(&instance, &forged),
            Err(ToyError::Unreachable(_))
        ));
        let foreign_op = state_of(&instance, &[("apply *9: 18\n", false)]);
        assert!(view_state(&instance, &foreign_op).is_err());
    }

    #[test]
    fn fast_rollout_reaches_terminal() {
        let instance = ToyInstance {
            start: 1,
            target: 8,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(2)],
            max_depth: 4,
        };
        let backend = ToyBackend::new(11);
        let rollout = backend.fast_rollout_policy();
        let root = render_state(&instance.prompt(), &[]);
        let traj = crate::policy::fast_rollout(&rollout, &root).unwrap();
        assert!(traj.terminal);
        assert!(traj.options.last().unwrap().is_terminal);
        assert!(traj.options.len() <= instance.max_depth as usize + 1);
    }

    #[test]
    fn toy_prm_flags_dead_steps() {
        let instance = ToyInstance {
            start: 1,
            target: 4,
            ops: vec![ToyOp::Add(1), ToyOp::Mul(3)],
            max_depth: 2,
        };
        let backend = ToyBackend::new(0);
        let prm = backend.process_critic();
        // From 1 the only two-step solution is *3 then +1; taking +1 first
        // strands the search (from 2 only 3 and 6 are reachable).
        let root = render_state(&instance.prompt(), &[]);
        let alive = OptionStep::new("apply *3: 3\n", "newline", false).unwrap();
        let dead = OptionStep::new("apply +1: 2\n", "newline", false).unwrap();
        assert_eq!(prm.assess(&root, &alive).unwrap().scalar, 1.0);
        assert_eq!(prm.assess(&root, &dead).unwrap().scalar, 0.0);
    }

    #[test]
    fn toy_orm_checks_answers_exactly() {
        let instance = plus2();
        let backend = ToyBackend::new(0);
        let orm = backend.outcome_critic();
        let prompt = instance.prompt();
        let good = Trajectory {
            prompt: prompt.clone(),
            options: vec![
                OptionStep::new("apply +2: 4\n", "newline", false).unwrap(),
                OptionStep::new("#### 4", "newline", true).unwrap(),
            ],
            terminal: true,
            critic_score: None,
            final_reward: None,
        };
        let verdict = orm.assess(&prompt, &good).unwrap();
        assert_eq!(verdict.scalar, 1.0);
        assert!(verdict.tool_checked);
        let capped = Trajectory {
            terminal: false,
            options: vec![OptionStep::new("apply +2: 4\n", "newline", false).unwrap()],
            ..good.clone()
        };
        assert_eq!(orm.assess(&prompt, &capped).unwrap().scalar, 0.0);
    }

    #[test]
    fn tool_verifier_needs_an_answer() {
        let instance = plus2();
        let backend = ToyBackend::new(0);
        let tool = backend.tool_verifier();
        let prompt = instance.prompt();
        let no_answer = Trajectory {
            prompt: prompt.clone(),
            options: vec![OptionStep::new("apply +2: 4\n", "newline", false).unwrap()],
            terminal: false,
            critic_score: None,
            final_reward: None,
        };
        assert!(tool.verify(&prompt, &no_answer).is_err());
    }

    #[test]
    fn noisy_value_critic_is_deterministic_and_clamped() {
        let instance = plus2();
        let backend = ToyBackend::new(5).with_value_noise(0.3);
        let critic = backend.value_critic();
        let root = render_state(&instance.prompt(), &[]);
        let a = critic.value(&root).unwrap();
        let b = critic.value(&root).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn sampler_emits_solvable_instances() {
        let sampler = InstanceSampler::default();
        for instance in sampler.sample_batch(123, 50) {
            instance.validate().unwrap();
            let oracle = ToyOracle::new(instance.clone()).unwrap();
            assert_eq!(oracle.optimal_reward(), 1.0, "unsolvable: {instance:?}");
            assert!(oracle.min_solution_steps().unwrap() >= 1);
        }
        // Same seed, same batch.
        assert_eq!(sampler.sample_batch(9, 5), sampler.sample_batch(9, 5));
    }
}
