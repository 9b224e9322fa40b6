//! Machine-readable tree export: schema `etamcts-tree/1`.
//!
//! Nodes are keyed by id in creation order with a fixed field set per node:
//! `{parent, option_text, n, w, value, prm, importance, depth, group}`.
//! The output is deterministic byte-for-byte for a given tree.

use crate::types::{NodeId, SearchTree};
use serde::Serialize;
use serde_json::{Map, Value};
use std::path::Path;

/// Schema identifier of the dump format.
pub const TREE_SCHEMA: &str = "etamcts-tree/1";

#[derive(Serialize)]
struct NodeDump<'a> {
    parent: Option<usize>,
    option_text: Option<&'a str>,
    n: u64,
    w: f64,
    value: f64,
    prm: Option<f64>,
    importance: Option<f64>,
    depth: usize,
    group: Option<usize>,
}

/// Renders the canonical JSON dump of a tree.
pub fn tree_dump(tree: &SearchTree) -> String {
    let mut nodes = Map::new();
    for node in tree.nodes() {
        let dump = NodeDump {
            parent: node.parent.map(|NodeId(i)| i),
            option_text: node.option.as_ref().map(|o| o.text.as_str()),
            n: node.stats.visit_count,
            w: node.stats.mean_value,
            value: node.value_estimate,
            prm: node.prm_reward,
            importance: node.importance,
            depth: node.depth,
            group: node.group.map(|g| g.0),
        };
        nodes.insert(
            node.id.to_string(),
            serde_json::to_value(dump).expect("node serializes"),
        );
    }
    let mut root = Map::new();
    root.insert("schema".to_string(), Value::from(TREE_SCHEMA));
    root.insert("rollout_count".to_string(), Value::from(tree.rollout_count));
    root.insert("nodes".to_string(), Value::Object(nodes));
    serde_json::to_string_pretty(&Value::Object(root)).expect("dump serializes")
}

/// Writes the dump to a file.
pub fn write_tree_dump(tree: &SearchTree, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, tree_dump(tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{render_state, OptionStep, PromptText, SearchTree};

    fn sample_tree() -> SearchTree {
        let prompt = PromptText::new("p").unwrap();
        let mut tree = SearchTree::new(render_state(&prompt, &[]), 0.5);
        for i in 0..11 {
            tree.add_child(
                NodeId(0),
                OptionStep::new(format!("s{i}\n"), "newline", false).unwrap(),
                0.1 * f64::from(i),
                Some(1.0),
            )
            .unwrap();
        }
        tree
    }

    #[test]
    fn dump_is_stable_and_keyed_in_creation_order() {
        let tree = sample_tree();
        let dump = tree_dump(&tree);
        assert_eq!(dump, tree_dump(&tree));
        assert!(dump.contains("\"schema\": \"etamcts-tree/1\""));
        // Creation order, not lexicographic: "2" before "10".
        let at_2 = dump.find("\"2\":").unwrap();
        let at_10 = dump.find("\"10\":").unwrap();
        assert!(at_2 < at_10);
        let parsed: serde_json::Value = serde_json::from_str(&dump).unwrap();
        assert_eq!(parsed["rollout_count"], 11);
        assert_eq!(parsed["nodes"]["0"]["parent"], serde_json::Value::Null);
        assert_eq!(parsed["nodes"]["3"]["option_text"], "s2\n");
        assert_eq!(parsed["nodes"]["3"]["group"], 2);
    }
}
