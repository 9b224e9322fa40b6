//! Shared toy-domain harness for the integration and acceptance suites.
//!
//! Each test target pulls in the subset it needs.
#![allow(dead_code)]

use etamcts::backends::derive_seed;
use etamcts::backends::toy::{InstanceSampler, ToyBackend, ToyInstance};
use etamcts::critics::RewardOracle;
use etamcts::params::SearchParams;
use etamcts::search::{best_trajectory, IterationRecord, SearchEngine};
use etamcts::termination::TerminationRegistry;
use etamcts::types::SearchTree;

/// Outcome of one toy search: the tree, its per-iteration records, and
/// whether the best trajectory answered correctly (oracle-checked).
pub struct ToyRun {
    pub tree: SearchTree,
    pub records: Vec<IterationRecord>,
    pub solved: bool,
}

/// Runs one seeded toy search with fresh components, mirroring the CLI's
/// per-instance wiring: each (instance, run_seed) pair is reproducible and
/// paired across parameter variants.
pub fn run_toy_instance(
    instance: &ToyInstance,
    params: &SearchParams,
    run_seed: u64,
    value_noise: f64,
) -> ToyRun {
    let backend = ToyBackend::new(run_seed).with_value_noise(value_noise);
    let generator = backend.generator();
    let fast = backend.fast_rollout_policy();
    let critics = backend.critic_bundle(params.weights).expect("weights valid");
    let registry = TerminationRegistry::with_builtins();
    let engine = SearchEngine::new(&generator, &fast, &critics, params, &registry)
        .expect("engine builds");
    let prompt = instance.prompt();
    let (tree, records) = engine.run_traced(&prompt).expect("search completes");
    let best = best_trajectory(&tree).expect("a scored leaf exists");
    let solved = backend
        .reward_oracle()
        .final_reward(&best)
        .expect("reward computes")
        >= 1.0;
    ToyRun {
        tree,
        records,
        solved,
    }
}

/// The deterministic instance batch used by the evaluation harness.
pub fn suite_instances(seed: u64, count: usize) -> Vec<ToyInstance> {
    InstanceSampler::default().sample_batch(derive_seed(seed, "eval-instances", 0), count)
}

/// Per-instance run seed, paired across parameter variants.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "eval-run", index as u64)
}

/// Accuracy and mean rollout count of one parameter variant over a suite.
pub fn evaluate_suite(
    instances: &[ToyInstance],
    params: &SearchParams,
    seed: u64,
    value_noise: f64,
) -> (f64, f64) {
    let mut solved = 0usize;
    let mut rollouts = 0u64;
    for (index, instance) in instances.iter().enumerate() {
        let run = run_toy_instance(instance, params, run_seed(seed, index), value_noise);
        solved += usize::from(run.solved);
        rollouts += run.tree.rollout_count;
    }
    (
        solved as f64 / instances.len() as f64,
        rollouts as f64 / instances.len() as f64,
    )
}
