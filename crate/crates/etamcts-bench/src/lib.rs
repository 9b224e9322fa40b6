//! Shared fixtures for the criterion benchmarks.

use etamcts::backends::toy::{InstanceSampler, ToyBackend, ToyInstance};
use etamcts::critics::{CriticBundle, CriticWeights};
use etamcts::params::SearchParams;
use etamcts::policy::{FastRolloutPolicy, OptionGenerator};
use etamcts::termination::TerminationRegistry;

/// A deterministic mid-size toy instance for engine benchmarks.
pub fn bench_instance() -> ToyInstance {
    InstanceSampler::default().sample(8)
}

/// Everything a benchmarked search needs, wired from one seed.
pub struct BenchRig {
    pub backend: ToyBackend,
    pub generator: Box<dyn OptionGenerator>,
    pub fast: Box<dyn FastRolloutPolicy>,
    pub critics: CriticBundle,
    pub params: SearchParams,
    pub registry: TerminationRegistry,
}

pub fn bench_rig(seed: u64, budget: u64) -> BenchRig {
    let backend = ToyBackend::new(seed);
    let generator = Box::new(backend.generator());
    let fast = Box::new(backend.fast_rollout_policy());
    let critics = backend
        .critic_bundle(CriticWeights::default())
        .expect("weights valid");
    let mut params = SearchParams::toy_default();
    params.rollout_budget = budget;
    BenchRig {
        backend,
        generator,
        fast,
        critics,
        params,
        registry: TerminationRegistry::with_builtins(),
    }
}
