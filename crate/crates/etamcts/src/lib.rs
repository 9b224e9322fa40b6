//! Option-level Monte Carlo tree search for sequence-generation MDPs.
//!
//! Text generation is searched at the granularity of *options* — token spans
//! delimited by a termination rule — rather than single tokens or fixed
//! sentences. The engine adds importance-based adaptive branching, state
//! merging of near-duplicate options, fast-rollout simulation with a cheap
//! secondary policy, and a three-critic scoring stack (value function,
//! process reward, outcome reward). On top of the engine sits a
//! self-improvement loop that synthesizes prompts, searches best
//! trajectories, filters them by outcome score, and exports training data.
//!
//! Backends are pluggable: a deterministic toy arithmetic domain with exact
//! oracles for verification, and an HTTP client for OpenAI-compatible
//! completion endpoints.

pub mod backends;
pub mod critics;
pub mod dump;
pub mod merge;
pub mod params;
pub mod policy;
pub mod search;
pub mod selfimprove;
pub mod termination;
pub mod types;

pub use critics::{CriticBundle, CriticWeights};
pub use params::{DepthMap, SearchParams, PROFILE_NAMES};
pub use search::{best_trajectory, run_search, SearchEngine, SearchError};
pub use termination::{TerminationRegistry, TerminationRule};
pub use types::{
    check_tree_integrity, extract_trajectory, render_state, NodeId, OptionStep, PromptText,
    SearchState, SearchTree, Trajectory,
};
