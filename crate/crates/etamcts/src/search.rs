//! The option-level tree search engine.
//!
//! Each iteration selects a node by upper confidence bound, widens it with a
//! freshly sampled option (merging near-duplicates into existing child
//! groups), scores the new node with the critic bundle plus fast-rollout
//! outcome estimates, and backpropagates the score to the root.
//!
//! Branching is importance-driven: a node may hold up to
//! `max(c_min(d), min(floor(alpha * I) + 1, c_max(d)))` children, where the
//! importance `I` is the largest deviation between the node's value estimate
//! and any child's. Nodes with agitated values get wider; settled nodes stay
//! narrow. Selection stops at the shallowest node that still has capacity,
//! so hot nodes re-widen as their importance grows.

use crate::critics::{aggregate_score, CriticBundle, CriticError};
use crate::merge::{merge_check, MergeJudge};
use crate::params::{DepthMap, ParamsError, SearchParams};
use crate::policy::{fast_rollout, generate_option, FastRolloutPolicy, OptionGenerator, PolicyError};
use crate::termination::{TerminationError, TerminationRegistry, TerminationRule};
use crate::types::{
    check_tree_integrity, extract_trajectory, render_state, CoreError, GroupId, NodeId,
    OptionStep, PromptText, SearchNode, SearchState, SearchTree, Trajectory,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error("importance undefined: node {0} has no children")]
    ImportanceUndefined(NodeId),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tree integrity violated after search: {0}")]
    Integrity(String),
}

impl SearchError {
    /// Failures of an external backend; the search returns its partial tree
    /// annotated instead of propagating these.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            SearchError::Policy(e) => e.is_backend_failure(),
            SearchError::Critic(e) => e.is_backend_failure(),
            _ => false,
        }
    }
}

/// Depth-dependent branching bounds plus the importance factor.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchingBounds {
    pub alpha: f64,
    pub c_min: DepthMap,
    pub c_max: DepthMap,
}

impl From<&SearchParams> for BranchingBounds {
    fn from(params: &SearchParams) -> Self {
        BranchingBounds {
            alpha: params.alpha,
            c_min: params.c_min.clone(),
            c_max: params.c_max.clone(),
        }
    }
}

/// The unclamped adaptive term `floor(alpha * importance) + 1`.
pub fn adaptive_branch_term(importance: f64, alpha: f64) -> u64 {
    let raw = (alpha * importance).floor();
    if raw >= u64::MAX as f64 {
        u64::MAX
    } else {
        raw as u64 + 1
    }
}

/// Number of children a node may hold:
/// `max(c_min(d), min(floor(alpha * I) + 1, c_max(d)))`, with an absent
/// importance treated as zero.
pub fn allowed_children(node: &SearchNode, bounds: &BranchingBounds) -> u32 {
    let importance = node.importance.unwrap_or(0.0);
    let term = adaptive_branch_term(importance, bounds.alpha).min(u64::from(u32::MAX)) as u32;
    let c_min = bounds.c_min.get(node.depth);
    let c_max = bounds.c_max.get(node.depth);
    c_min.max(term.min(c_max))
}

fn effective_allowed(node: &SearchNode, params: &SearchParams) -> u32 {
    if params.adaptive_branching {
        allowed_children(node, &BranchingBounds::from(params))
    } else {
        params.c_max.get(node.depth)
    }
}

/// Whether a node may receive another child under the active bounds.
pub fn is_expandable(node: &SearchNode, params: &SearchParams) -> bool {
    !node.is_terminal() && (node.children.len() as u32) < effective_allowed(node, params)
}

fn has_expandable(tree: &SearchTree, params: &SearchParams) -> bool {
    tree.nodes().any(|n| is_expandable(n, params))
}

/// UCT score of a visited child: `w + c * sqrt(2 * ln(N) / n)` with the
/// child's mean (or value-estimate prior when unvisited) as `w` and the
/// visit count clamped to at least one.
pub fn ucb_score(child: &SearchNode, parent: &SearchNode, c: f64) -> Result<f64, SearchError> {
    if parent.stats.visit_count == 0 {
        return Err(SearchError::Contract(
            "ucb_score requires a visited parent".to_string(),
        ));
    }
    let n = child.stats.visit_count.max(1) as f64;
    let big_n = parent.stats.visit_count as f64;
    Ok(child.effective_mean() + c * (2.0 * big_n.ln() / n).sqrt())
}

/// One child's standing during a selection step. Unvisited children carry an
/// infinite effective score (first-play urgency).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub child: NodeId,
    pub visits: u64,
    pub mean: f64,
    pub ucb: f64,
}

/// One argmax decision: every candidate's score and the chosen child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub parent: NodeId,
    pub parent_visits: u64,
    pub exploration_c: f64,
    pub candidates: Vec<CandidateScore>,
    pub chosen: NodeId,
}

/// The path walked by selection and every scored comparison along it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub path: Vec<NodeId>,
    pub steps: Vec<SelectionStep>,
}

impl SelectionTrace {
    /// Per-step (child, score) lists in path order.
    pub fn ucb_values(&self) -> Vec<Vec<(NodeId, f64)>> {
        self.steps
            .iter()
            .map(|s| s.candidates.iter().map(|c| (c.child, c.ucb)).collect())
            .collect()
    }
}

fn ucb_step(tree: &SearchTree, parent_id: NodeId, c: f64) -> Result<SelectionStep, SearchError> {
    let parent = tree.node(parent_id)?;
    let mut candidates = Vec::with_capacity(parent.children.len());
    for (_, child_id) in &parent.children {
        let child = tree.node(*child_id)?;
        let ucb = if child.stats.visit_count == 0 {
            f64::INFINITY
        } else {
            ucb_score(child, parent, c)?
        };
        candidates.push(CandidateScore {
            child: *child_id,
            visits: child.stats.visit_count,
            mean: child.effective_mean(),
            ucb,
        });
    }
    // Children are stored in creation order (ascending id), so keeping the
    // first maximum breaks ties toward the lowest id. The negated compare
    // keeps the incumbent when a candidate score is NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let chosen = candidates
        .iter()
        .fold(None::<&CandidateScore>, |best, cand| match best {
            Some(b) if !(cand.ucb > b.ucb) => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| SearchError::Contract(format!("node {parent_id} has no children")))?
        .child;
    Ok(SelectionStep {
        parent: parent_id,
        parent_visits: parent.stats.visit_count,
        exploration_c: c,
        candidates,
        chosen,
    })
}

/// Walks from the root along argmax-UCB children until reaching a node that
/// is terminal or still has child capacity, recording every comparison.
pub fn select(tree: &SearchTree, params: &SearchParams) -> Result<SelectionTrace, SearchError> {
    let mut trace = SelectionTrace {
        path: vec![tree.root_id()],
        steps: Vec::new(),
    };
    let mut current = tree.root_id();
    loop {
        let node = tree.node(current)?;
        if node.is_terminal() || is_expandable(node, params) || node.children.is_empty() {
            return Ok(trace);
        }
        let step = ucb_step(tree, current, params.exploration_c)?;
        current = step.chosen;
        trace.path.push(current);
        trace.steps.push(step);
    }
}

/// Recomputes a node's importance (max |child value − own value|) and caches
/// it. Errs when the node has no children; callers then fall back to the
/// `c_min` branch of the bounds.
pub fn node_importance(tree: &mut SearchTree, id: NodeId) -> Result<f64, SearchError> {
    let node = tree.node(id)?;
    if node.children.is_empty() {
        return Err(SearchError::ImportanceUndefined(id));
    }
    let own = node.value_estimate;
    let mut importance = 0.0_f64;
    for (_, child) in node.children.clone() {
        importance = importance.max((tree.node(child)?.value_estimate - own).abs());
    }
    tree.node_mut(id)?.importance = Some(importance);
    Ok(importance)
}

/// Adds `score` to every node on a root-anchored chain, incrementing visit
/// counts by one and refreshing running means.
pub fn backpropagate(
    tree: &mut SearchTree,
    path: &[NodeId],
    score: f64,
) -> Result<(), SearchError> {
    match path.first() {
        None => {
            return Err(SearchError::Contract("empty backpropagation path".to_string()));
        }
        Some(first) if *first != tree.root_id() => {
            return Err(CoreError::NotAChain(format!("path starts at {first}, not the root")).into());
        }
        _ => {}
    }
    for pair in path.windows(2) {
        if tree.node(pair[1])?.parent != Some(pair[0]) {
            return Err(CoreError::NotAChain(format!(
                "{} is not the parent of {}",
                pair[0], pair[1]
            ))
            .into());
        }
    }
    for id in path {
        tree.node_mut(*id)?.stats.record(score);
    }
    Ok(())
}

/// Outcome of one expansion attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Expansion {
    /// A new node was created.
    Created(NodeId),
    /// The sampled option folded into an existing child group; no node was
    /// created and the group's representative is returned.
    Merged {
        group: GroupId,
        representative: NodeId,
    },
}

/// What one search iteration did: the walked trace (also the backpropagation
/// path), the node it created or merged into, and the backed-up score.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub trace: SelectionTrace,
    pub expanded: Option<NodeId>,
    pub merged_into: Option<NodeId>,
    pub score: f64,
}

/// The search engine: policies, critics, and parameters wired together.
pub struct SearchEngine<'a> {
    gen: &'a dyn OptionGenerator,
    fast: &'a dyn FastRolloutPolicy,
    critics: &'a CriticBundle,
    params: &'a SearchParams,
    rule: Arc<TerminationRule>,
    merge_judge: Option<&'a dyn MergeJudge>,
}

impl<'a> SearchEngine<'a> {
    pub fn new(
        gen: &'a dyn OptionGenerator,
        fast: &'a dyn FastRolloutPolicy,
        critics: &'a CriticBundle,
        params: &'a SearchParams,
        registry: &TerminationRegistry,
    ) -> Result<Self, SearchError> {
        params.validate()?;
        let rule = registry.get(&params.termination_rule)?;
        Ok(SearchEngine {
            gen,
            fast,
            critics,
            params,
            rule,
            merge_judge: None,
        })
    }

    /// Installs a backend judge for the model-based merge predicate.
    pub fn with_merge_judge(mut self, judge: &'a dyn MergeJudge) -> Self {
        self.merge_judge = Some(judge);
        self
    }

    pub fn rule(&self) -> &TerminationRule {
        &self.rule
    }

    /// Samples one option at `leaf`, merge-checks it against the existing
    /// child groups, and either folds it into a group or creates a scored
    /// child node (value estimate and process reward computed up front).
    pub fn expand(&self, tree: &mut SearchTree, leaf: NodeId) -> Result<Expansion, SearchError> {
        let state = {
            let node = tree.node(leaf)?;
            if !is_expandable(node, self.params) {
                return Err(SearchError::Contract(format!(
                    "node {leaf} is not expandable"
                )));
            }
            node.state.clone()
        };
        let option = generate_option(
            self.gen,
            &state,
            self.params.expansion_temperature,
            &self.rule,
            self.params.max_option_tokens,
        )?;

        if self.params.merge_enabled {
            let node = tree.node(leaf)?;
            let mut groups: Vec<(GroupId, &OptionStep)> = Vec::with_capacity(node.children.len());
            let mut representatives: Vec<(GroupId, NodeId)> = Vec::with_capacity(node.children.len());
            for (group, child_id) in &node.children {
                let child = tree.node(*child_id)?;
                if let Some(rep_option) = &child.option {
                    groups.push((*group, rep_option));
                    representatives.push((*group, *child_id));
                }
            }
            if let Some(group) = merge_check(&option, &groups, &self.params.merge, self.merge_judge)
            {
                let representative = representatives
                    .iter()
                    .find(|(g, _)| *g == group)
                    .map(|(_, id)| *id)
                    .ok_or_else(|| {
                        SearchError::Contract(format!("merge group {group} has no representative"))
                    })?;
                return Ok(Expansion::Merged {
                    group,
                    representative,
                });
            }
        }

        let child_state = state.child(option.clone());
        let value = self.critics.value.value(&child_state)?;
        let prm = self.critics.prm.assess(&state, &option)?;
        if prm.parse_warning {
            tree.warnings
                .push(format!("unparseable process-reward response at node {leaf}"));
        }
        let id = tree.add_child(leaf, option, value, Some(prm.scalar))?;
        self.refresh_expandable(tree, leaf)?;
        Ok(Expansion::Created(id))
    }

    /// Scores a node: the weighted sum of its value estimate, its process
    /// reward, and the mean outcome verdict over fast rollouts from its
    /// state. The score is cached on the node.
    ///
    /// Rollouts are skipped when the outcome weight is zero. Transport
    /// failures drop individual samples; when every sample fails, the
    /// outcome term is omitted and the remaining weights are scaled so the
    /// total weight is preserved, with a warning recorded on the tree.
    pub fn simulate(&self, tree: &mut SearchTree, id: NodeId) -> Result<f64, SearchError> {
        let (state, value, prm) = {
            let node = tree.node(id)?;
            (
                node.state.clone(),
                node.value_estimate,
                node.prm_reward.unwrap_or(0.0),
            )
        };
        let weights = &self.critics.weights;
        let mut transport_failures = Vec::new();
        let mut samples = Vec::new();
        if weights.orm > 0.0 {
            for result in self.outcome_samples(&state) {
                match result {
                    Ok(sample) => samples.push(sample),
                    Err(e) if e.is_backend_failure() => transport_failures.push(e.to_string()),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let score = if weights.orm > 0.0 && samples.is_empty() && !transport_failures.is_empty() {
            let remaining = weights.value + weights.prm;
            tree.warnings.push(format!(
                "node {id}: all {} fast rollouts failed transport; outcome term omitted and weights renormalized",
                transport_failures.len()
            ));
            if remaining > 0.0 {
                (weights.value * value + weights.prm * prm) * weights.total() / remaining
            } else {
                0.0
            }
        } else {
            if !transport_failures.is_empty() {
                tree.warnings.push(format!(
                    "node {id}: {} of {} fast rollouts failed transport",
                    transport_failures.len(),
                    self.params.fast_rollout_count
                ));
            }
            aggregate_score(value, prm, &samples, weights).total
        };
        tree.node_mut(id)?.sim_score = Some(score);
        Ok(score)
    }

    /// Draws the configured number of fast rollouts from `state` and scores
    /// each with the outcome critic, in submission order. Fans out across
    /// threads up to the configured parallelism.
    fn outcome_samples(&self, state: &SearchState) -> Vec<Result<f64, CriticError>> {
        let count = self.params.fast_rollout_count as usize;
        let one = |_: usize| -> Result<f64, CriticError> {
            let trajectory = fast_rollout(self.fast, state)?;
            Ok(self.critics.orm.assess(state.prompt(), &trajectory)?.scalar)
        };
        let parallelism = self.params.simulation_parallelism as usize;
        if parallelism <= 1 || count <= 1 {
            return (0..count).map(one).collect();
        }
        let mut results = Vec::with_capacity(count);
        for wave in (0..count).collect::<Vec<_>>().chunks(parallelism) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave.iter().map(|k| scope.spawn(move || one(*k))).collect();
                for handle in handles {
                    results.push(handle.join().expect("rollout worker panicked"));
                }
            });
        }
        results
    }

    fn refresh_expandable(&self, tree: &mut SearchTree, id: NodeId) -> Result<(), SearchError> {
        let flag = is_expandable(tree.node(id)?, self.params);
        tree.node_mut(id)?.expandable = flag;
        Ok(())
    }

    /// One full iteration: select, widen (descending through merged groups),
    /// simulate, and backpropagate. The walked path is the backup path.
    fn run_iteration(&self, tree: &mut SearchTree) -> Result<IterationRecord, SearchError> {
        let mut trace = select(tree, self.params)?;
        let mut current = *trace.path.last().expect("selection path is never empty");
        let mut expanded = None;
        let mut merged_into = None;
        let score = loop {
            let (terminal, expandable, cached, has_children) = {
                let node = tree.node(current)?;
                (
                    node.is_terminal(),
                    is_expandable(node, self.params),
                    node.sim_score,
                    !node.children.is_empty(),
                )
            };
            if terminal {
                // Terminal critics are fixed; reuse the cached score.
                break match cached {
                    Some(score) => score,
                    None => self.simulate(tree, current)?,
                };
            }
            if expandable {
                match self.expand(tree, current)? {
                    Expansion::Created(id) => {
                        trace.path.push(id);
                        expanded = Some(id);
                        break self.simulate(tree, id)?;
                    }
                    Expansion::Merged { representative, .. } => {
                        // The sampled option restated an existing child;
                        // treat the iteration as a visit to that child.
                        merged_into = Some(representative);
                        trace.path.push(representative);
                        current = representative;
                    }
                }
            } else if has_children {
                let step = ucb_step(tree, current, self.params.exploration_c)?;
                current = step.chosen;
                trace.path.push(current);
                trace.steps.push(step);
            } else {
                // A childless node pinned shut by the bounds; score in place.
                break match cached {
                    Some(score) => score,
                    None => self.simulate(tree, current)?,
                };
            }
        };
        backpropagate(tree, &trace.path, score)?;
        for id in trace.path.clone() {
            self.refresh_expandable(tree, id)?;
        }
        Ok(IterationRecord {
            trace,
            expanded,
            merged_into,
            score,
        })
    }

    /// Runs the search loop until the rollout budget is exhausted, no
    /// expandable node remains, or progress stalls (consecutive iterations
    /// without a node creation hit the stall limit).
    pub fn run(&self, prompt: &PromptText) -> Result<SearchTree, SearchError> {
        self.run_traced(prompt).map(|(tree, _)| tree)
    }

    /// Like [`SearchEngine::run`], also returning the per-iteration records
    /// used for replay verification.
    pub fn run_traced(
        &self,
        prompt: &PromptText,
    ) -> Result<(SearchTree, Vec<IterationRecord>), SearchError> {
        let root_state = render_state(prompt, &[]);
        let root_value = self.critics.value.value(&root_state)?;
        let mut tree = SearchTree::new(root_state, root_value);
        let budget = self.params.rollout_budget;
        let iteration_cap = budget.saturating_mul(10).max(1_000);
        let mut records = Vec::new();
        let mut stalled = 0u64;
        let mut iterations = 0u64;
        while tree.rollout_count < budget
            && iterations < iteration_cap
            && stalled < self.params.stall_limit
            && has_expandable(&tree, self.params)
        {
            iterations += 1;
            match self.run_iteration(&mut tree) {
                Ok(record) => {
                    stalled = if record.expanded.is_some() { 0 } else { stalled + 1 };
                    records.push(record);
                }
                Err(e) if e.is_backend_failure() => {
                    tree.error = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let violations = check_tree_integrity(&tree);
        if !violations.is_empty() {
            let detail = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(SearchError::Integrity(detail));
        }
        Ok((tree, records))
    }
}

/// Builds an engine and runs one search.
pub fn run_search(
    prompt: &PromptText,
    gen: &dyn OptionGenerator,
    fast: &dyn FastRolloutPolicy,
    critics: &CriticBundle,
    params: &SearchParams,
    registry: &TerminationRegistry,
) -> Result<SearchTree, SearchError> {
    SearchEngine::new(gen, fast, critics, params, registry)?.run(prompt)
}

/// The trajectory ending at the highest-scored terminal leaf (ties to the
/// lowest node id). Falls back to the best-scored leaf, flagged
/// non-terminal, when the tree holds no terminal node.
pub fn best_trajectory(tree: &SearchTree) -> Result<Trajectory, SearchError> {
    let argmax = |nodes: &mut dyn Iterator<Item = &SearchNode>| -> Option<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for node in nodes {
            if let Some(score) = node.sim_score {
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, node.id));
                }
            }
        }
        best.map(|(_, id)| id)
    };
    let terminal = argmax(&mut tree.nodes().filter(|n| n.is_terminal()));
    let leaf = terminal.or_else(|| argmax(&mut tree.nodes().filter(|n| n.children.is_empty())));
    match leaf {
        Some(id) => Ok(extract_trajectory(tree, id)?),
        None => Err(SearchError::Contract(
            "tree has no scored leaf to extract".to_string(),
        )),
    }
}
