//! State merge: newly generated options that are near-duplicates of an
//! existing child are folded into that child's group instead of spawning a
//! redundant subtree.
//!
//! The node predicate is a pluggable heuristic: Levenshtein edit distance,
//! cosine similarity over character 3-gram counts, or a model-based
//! same/different judgement.

use crate::types::{GroupId, OptionStep};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merge judge failed: {0}")]
    Judge(String),
}

/// Configuration of the node predicate used during expansion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MergePredicateConfig {
    /// Merge when Levenshtein distance <= threshold (`20` and `50` are the
    /// reference settings; `0` merges byte-identical options only).
    EditDistance { threshold: u32 },
    /// Merge when 3-gram cosine similarity >= threshold (in [0, 1]).
    CosineSimilarity { threshold: f64 },
    /// Ask a backend judge, falling back to edit distance on failure.
    ModelBased {
        prompt_id: String,
        fallback_edit_threshold: u32,
    },
}

impl MergePredicateConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            MergePredicateConfig::CosineSimilarity { threshold } => {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(format!("cosine threshold {threshold} outside [0, 1]"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Default for MergePredicateConfig {
    fn default() -> Self {
        MergePredicateConfig::EditDistance { threshold: 20 }
    }
}

/// Backend hook for the model-based predicate: does `candidate` express the
/// same step as `representative`?
pub trait MergeJudge: Send + Sync {
    fn same(&self, candidate: &str, representative: &str) -> Result<bool, MergeError>;
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    if a == b {
        return 0;
    }
    let b_chars: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b_chars.len()).collect();
    let mut curr = vec![0usize; b_chars.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b_chars.iter().enumerate() {
            let cost = usize::from(ca != *cb);
            curr[j + 1] = (curr[j] + 1).min(prev[j + 1] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b_chars.len()]
}

fn trigram_counts(text: &str) -> HashMap<[char; 3], u32> {
    let chars: Vec<char> = text.chars().collect();
    let mut counts = HashMap::new();
    for win in chars.windows(3) {
        *counts.entry([win[0], win[1], win[2]]).or_insert(0) += 1;
    }
    counts
}

/// Cosine similarity between character 3-gram count vectors.
///
/// Texts too short to contain a trigram have a zero vector; the similarity
/// is then 1.0 for equal texts and 0.0 otherwise.
pub fn trigram_cosine(a: &str, b: &str) -> f64 {
    let ca = trigram_counts(a);
    let cb = trigram_counts(b);
    if ca.is_empty() || cb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let dot: f64 = ca
        .iter()
        .filter_map(|(k, va)| cb.get(k).map(|vb| f64::from(*va) * f64::from(*vb)))
        .sum();
    let na: f64 = ca.values().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Checks a candidate option against existing child groups, in group order.
///
/// Returns the first group the candidate merges into, or `None` when it is
/// distinct enough to open a new group. Identical text always merges,
/// whatever the predicate. A model-based judge failure falls back to edit
/// distance at the configured fallback threshold.
pub fn merge_check(
    candidate: &OptionStep,
    groups: &[(GroupId, &OptionStep)],
    cfg: &MergePredicateConfig,
    judge: Option<&dyn MergeJudge>,
) -> Option<GroupId> {
    for (group, rep) in groups {
        if candidate.text == rep.text {
            return Some(*group);
        }
        let merged = match cfg {
            MergePredicateConfig::EditDistance { threshold } => {
                levenshtein(&candidate.text, &rep.text) <= *threshold as usize
            }
            MergePredicateConfig::CosineSimilarity { threshold } => {
                trigram_cosine(&candidate.text, &rep.text) >= *threshold
            }
            MergePredicateConfig::ModelBased {
                fallback_edit_threshold,
                ..
            } => match judge.map(|j| j.same(&candidate.text, &rep.text)) {
                Some(Ok(same)) => same,
                Some(Err(_)) | None => {
                    levenshtein(&candidate.text, &rep.text) <= *fallback_edit_threshold as usize
                }
            },
        };
        if merged {
            return Some(*group);
        }
    }
    None
}
