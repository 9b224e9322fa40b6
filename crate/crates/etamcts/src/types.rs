//! Domain types shared by every subsystem: prompts, option steps, rendered
//! states, trajectories, tree nodes, and the search tree itself, plus the
//! structural integrity checks that every completed search must satisfy.
//!
//! The text-generation process is modelled as an MDP whose actions are
//! *options*: variable-length token spans delimited by a termination rule.
//! A state is the prompt plus the options emitted so far; its `rendered`
//! form is always the byte-exact concatenation of the two.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Errors raised by the core domain types.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("prompt text must be non-empty")]
    EmptyPrompt,
    #[error("option text must be non-empty unless the option is terminal")]
    EmptyOption,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("path is not a root-anchored chain: {0}")]
    NotAChain(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// The input sequence the search starts from. Never mutated by any operation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Result<Self, CoreError> {
        let text = text.into();
        if text.is_empty() {
            return Err(CoreError::EmptyPrompt);
        }
        Ok(PromptText(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One option: a generated token span ending at a termination boundary.
///
/// `boundary` names the termination rule that cut the span. A terminal
/// option ends the whole trajectory (e.g. it carries the final-answer
/// marker) and is the only kind allowed to have empty text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionStep {
    pub text: String,
    pub boundary: String,
    pub is_terminal: bool,
}

impl OptionStep {
    pub fn new(
        text: impl Into<String>,
        boundary: impl Into<String>,
        is_terminal: bool,
    ) -> Result<Self, CoreError> {
        let step = OptionStep {
            text: text.into(),
            boundary: boundary.into(),
            is_terminal,
        };
        if step.text.is_empty() && !step.is_terminal {
            return Err(CoreError::EmptyOption);
        }
        Ok(step)
    }
}

/// A prompt plus the ordered options emitted so far.
///
/// `rendered` is maintained as the exact concatenation of the prompt and all
/// option texts; it is recomputable and byte-equal at all times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    prompt: PromptText,
    options: Vec<OptionStep>,
    rendered: String,
}

impl SearchState {
    pub fn prompt(&self) -> &PromptText {
        &self.prompt
    }

    pub fn options(&self) -> &[OptionStep] {
        &self.options
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }

    /// Number of options taken so far.
    pub fn depth(&self) -> usize {
        self.options.len()
    }

    /// True once the last option is terminal; no further options may follow.
    pub fn is_terminal(&self) -> bool {
        self.options.last().is_some_and(|o| o.is_terminal)
    }

    /// The state reached by appending one more option.
    pub fn child(&self, option: OptionStep) -> SearchState {
        let mut rendered = self.rendered.clone();
        rendered.push_str(&option.text);
        let mut options = self.options.clone();
        options.push(option);
        SearchState {
            prompt: self.prompt.clone(),
            options,
            rendered,
        }
    }
}

/// Builds a state by concatenating the prompt with the given options.
pub fn render_state(prompt: &PromptText, options: &[OptionStep]) -> SearchState {
    let mut rendered = String::from(prompt.as_str());
    for option in options {
        rendered.push_str(&option.text);
    }
    SearchState {
        prompt: prompt.clone(),
        options: options.to_vec(),
        rendered,
    }
}

/// A root-to-terminal (or best-effort) sequence of options with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptText,
    pub options: Vec<OptionStep>,
    pub terminal: bool,
    /// Aggregated critic score of the leaf, present iff the trajectory was scored.
    pub critic_score: Option<f64>,
    /// Oracle / ground-truth reward in {0, 1}, when known.
    pub final_reward: Option<f64>,
}

impl Trajectory {
    /// Concatenation of the option texts (the generated answer body).
    pub fn rendered_options(&self) -> String {
        self.options.iter().map(|o| o.text.as_str()).collect()
    }

    /// Prompt plus all option texts.
    pub fn rendered(&self) -> String {
        let mut out = String::from(self.prompt.as_str());
        out.push_str(&self.rendered_options());
        out
    }

    /// The state at the end of the trajectory.
    pub fn final_state(&self) -> SearchState {
        render_state(&self.prompt, &self.options)
    }
}

/// Per-node visit statistics.
///
/// `mean_value` is kept equal to `total_return / visit_count` whenever
/// `visit_count > 0`; an unvisited node has zero totals and its effective
/// mean for selection purposes is supplied by the node's value estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub visit_count: u64,
    pub total_return: f64,
    pub mean_value: f64,
}

impl NodeStats {
    pub fn record(&mut self, score: f64) {
        self.visit_count += 1;
        self.total_return += score;
        self.mean_value = self.total_return / self.visit_count as f64;
    }
}

/// Dense node identifier, assigned in creation order (root is 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a merge group within one parent's children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub usize);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One node of the search tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// The option on the edge from the parent; `None` at the root.
    pub option: Option<OptionStep>,
    /// Merge group this node represents within its parent; `None` at the root.
    pub group: Option<GroupId>,
    pub state: SearchState,
    pub stats: NodeStats,
    pub children: Vec<(GroupId, NodeId)>,
    /// Cached importance: max |child value − own value| over children.
    /// Absent until at least one child exists.
    pub importance: Option<f64>,
    /// Critic value estimate v(s) computed at creation.
    pub value_estimate: f64,
    /// Process-reward verdict for the inbound option, when computed.
    pub prm_reward: Option<f64>,
    /// Aggregated critic score from the simulation phase, once simulated.
    pub sim_score: Option<f64>,
    pub depth: usize,
    /// Engine-maintained: whether the node may still receive children under
    /// the active branching bounds.
    pub expandable: bool,
}

impl SearchNode {
    /// A node is terminal when the option that produced it was terminal.
    pub fn is_terminal(&self) -> bool {
        self.option.as_ref().is_some_and(|o| o.is_terminal)
    }

    /// Mean used for selection: the visited mean, or the critic prior for an
    /// unvisited node.
    pub fn effective_mean(&self) -> f64 {
        if self.stats.visit_count == 0 {
            self.value_estimate
        } else {
            self.stats.mean_value
        }
    }
}

/// The search tree: an arena of nodes indexed by `NodeId`.
///
/// `rollout_count` counts expansion events (node creations), the search-cost
/// metric reported by the engine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
    pub rollout_count: u64,
    /// Set when a backend hard-failure aborted the search mid-way; the tree
    /// built so far is still valid.
    pub error: Option<String>,
    /// Non-fatal warning records collected during the search.
    pub warnings: Vec<String>,
}

impl SearchTree {
    pub fn new(root_state: SearchState, root_value_estimate: f64) -> Self {
        let depth = root_state.depth();
        let root = SearchNode {
            id: NodeId(0),
            parent: None,
            option: None,
            group: None,
            state: root_state,
            stats: NodeStats::default(),
            children: Vec::new(),
            importance: None,
            value_estimate: root_value_estimate,
            prm_reward: None,
            sim_score: None,
            depth,
            expandable: true,
        };
        SearchTree {
            nodes: vec![root],
            rollout_count: 0,
            error: None,
            warnings: Vec::new(),
        }
    }

    pub fn root_id(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&SearchNode, CoreError> {
        self.nodes.get(id.0).ok_or(CoreError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, CoreError> {
        self.nodes.get_mut(id.0).ok_or(CoreError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.iter()
    }

    /// Creates a child node under `parent` in a fresh merge group, updates
    /// the parent's importance cache, and counts the expansion.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        option: OptionStep,
        value_estimate: f64,
        prm_reward: Option<f64>,
    ) -> Result<NodeId, CoreError> {
        let (state, depth, group, parent_value) = {
            let p = self.node(parent)?;
            (
                p.state.child(option.clone()),
                p.depth + 1,
                GroupId(p.children.len()),
                p.value_estimate,
            )
        };
        let id = NodeId(self.nodes.len());
        let terminal = option.is_terminal;
        self.nodes.push(SearchNode {
            id,
            parent: Some(parent),
            option: Some(option),
            group: Some(group),
            state,
            stats: NodeStats::default(),
            children: Vec::new(),
            importance: None,
            value_estimate,
            prm_reward,
            sim_score: None,
            depth,
            expandable: !terminal,
        });
        let p = self.node_mut(parent)?;
        p.children.push((group, id));
        let deviation = (value_estimate - parent_value).abs();
        p.importance = Some(p.importance.map_or(deviation, |i| i.max(deviation)));
        self.rollout_count += 1;
        Ok(id)
    }

    /// Node ids on the path from the root to `leaf`, inclusive.
    pub fn path_to(&self, leaf: NodeId) -> Result<Vec<NodeId>, CoreError> {
        let mut path = Vec::new();
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            path.push(id);
            cur = self.node(id)?.parent;
        }
        path.reverse();
        Ok(path)
    }
}

/// Reconstructs the root-to-leaf option sequence as a trajectory.
///
/// The terminal flag mirrors the leaf; the critic score is the leaf's
/// simulation score when present.
pub fn extract_trajectory(tree: &SearchTree, leaf: NodeId) -> Result<Trajectory, CoreError> {
    let leaf_node = tree.node(leaf)?;
    let path = tree.path_to(leaf)?;
    let mut options = Vec::with_capacity(path.len().saturating_sub(1));
    for id in path.iter().skip(1) {
        let node = tree.node(*id)?;
        let option = node
            .option
            .clone()
            .ok_or_else(|| CoreError::Contract(format!("non-root node {id} without option")))?;
        options.push(option);
    }
    Ok(Trajectory {
        prompt: tree.root().state.prompt().clone(),
        options,
        terminal: leaf_node.is_terminal(),
        critic_score: leaf_node.sim_score,
        final_reward: None,
    })
}

/// A single violated invariant found by [`check_tree_integrity`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegrityViolation {
    pub node: Option<NodeId>,
    pub detail: String,
}

impl fmt::Display for IntegrityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {id}: {}", self.detail),
            None => f.write_str(&self.detail),
        }
    }
}

const STATS_TOLERANCE: f64 = 1e-12;

/// Checks every structural and statistical invariant of the tree.
///
/// Returns an empty list iff the tree is sound; violations are data, not
/// errors, and each one names the offending node.
pub fn check_tree_integrity(tree: &SearchTree) -> Vec<IntegrityViolation> {
    let mut violations = Vec::new();
    let mut push = |node: Option<NodeId>, detail: String| {
        violations.push(IntegrityViolation { node, detail });
    };

    if tree.is_empty() {
        push(None, "tree has no root".to_string());
        return violations;
    }

    let mut child_refs: HashMap<NodeId, usize> = HashMap::new();
    for node in tree.nodes() {
        let id = node.id;

        match (id.0, node.parent) {
            (0, Some(_)) => push(Some(id), "root must not have a parent".to_string()),
            (0, None) => {}
            (_, None) => push(Some(id), "non-root node without parent".to_string()),
            (_, Some(p)) => {
                if p.0 >= id.0 {
                    push(
                        Some(id),
                        format!("parent {p} does not precede child (cycle hazard)"),
                    );
                } else if let Ok(pn) = tree.node(p) {
                    if !pn.children.iter().any(|(_, c)| *c == id) {
                        push(Some(id), format!("not listed among children of {p}"));
                    }
                } else {
                    push(Some(id), format!("unknown parent {p}"));
                }
            }
        }

        if id.0 == 0 {
            if node.option.is_some() {
                push(Some(id), "root must not carry an option".to_string());
            }
        } else {
            match &node.option {
                None => push(Some(id), "non-root node without option".to_string()),
                Some(o) => {
                    if o.text.is_empty() && !o.is_terminal {
                        push(Some(id), "empty non-terminal option".to_string());
                    }
                    if o.is_terminal && !node.children.is_empty() {
                        push(Some(id), "terminal node has children".to_string());
                    }
                }
            }
        }

        // Stats invariants.
        let stats = node.stats;
        if stats.visit_count == 0 {
            if stats.total_return != 0.0 {
                push(
                    Some(id),
                    "unvisited node with non-zero total return".to_string(),
                );
            }
        } else {
            let expected = stats.total_return / stats.visit_count as f64;
            if (stats.mean_value - expected).abs() > STATS_TOLERANCE {
                push(
                    Some(id),
                    format!(
                        "mean_value {} != total_return/visit_count {}",
                        stats.mean_value, expected
                    ),
                );
            }
        }

        // Visit bookkeeping: a parent absorbs at least its children's visits.
        let child_visits: u64 = node
            .children
            .iter()
            .filter_map(|(_, c)| tree.node(*c).ok())
            .map(|c| c.stats.visit_count)
            .sum();
        if stats.visit_count < child_visits {
            push(
                Some(id),
                format!(
                    "visit_count {} < sum of child visits {child_visits}",
                    stats.visit_count
                ),
            );
        }

        // Importance cache.
        if node.children.is_empty() {
            if node.importance.is_some() {
                push(Some(id), "importance cached without children".to_string());
            }
        } else {
            let expected = node
                .children
                .iter()
                .filter_map(|(_, c)| tree.node(*c).ok())
                .map(|c| (c.value_estimate - node.value_estimate).abs())
                .fold(0.0_f64, f64::max);
            match node.importance {
                None => push(Some(id), "importance missing despite children".to_string()),
                Some(i) => {
                    if (i - expected).abs() > STATS_TOLERANCE {
                        push(
                            Some(id),
                            format!("importance cache {i} != recomputed {expected}"),
                        );
                    }
                }
            }
        }

        // Rendered state must be the exact concatenation, and depths line up.
        let recomputed = render_state(node.state.prompt(), node.state.options());
        if recomputed.rendered() != node.state.rendered() {
            push(Some(id), "rendered state is not the concatenation".to_string());
        }
        if let Some(p) = node.parent {
            if let Ok(pn) = tree.node(p) {
                if node.depth != pn.depth + 1 {
                    push(Some(id), "depth != parent depth + 1".to_string());
                }
            }
        }

        for (_, c) in &node.children {
            *child_refs.entry(*c).or_insert(0) += 1;
            if tree.node(*c).is_err() {
                push(Some(id), format!("child {c} does not exist"));
            }
        }
    }

    // Every non-root node is referenced exactly once (reachability, no sharing).
    for node in tree.nodes().skip(1) {
        match child_refs.get(&node.id) {
            Some(1) => {}
            Some(n) => push(Some(node.id), format!("referenced {n} times as a child")),
            None => push(Some(node.id), "unreachable from root".to_string()),
        }
    }

    // One expansion event per created node.
    if tree.rollout_count != (tree.len() - 1) as u64 {
        push(
            None,
            format!(
                "rollout_count {} != node creations {}",
                tree.rollout_count,
                tree.len() - 1
            ),
        );
    }

    violations
}
