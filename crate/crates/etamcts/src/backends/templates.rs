//! Prompt templates and their registry.
//!
//! The built-in critic and policy templates are stored byte-exactly; tests
//! pin their rendered output against golden files. Rendering substitutes
//! each `{placeholder}` exactly once in a single pass, so binding values are
//! inserted verbatim and never rescanned.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template '{0}'")]
    Unknown(String),
    #[error("template '{id}' is missing bindings for: {keys}")]
    MissingBindings { id: String, keys: String },
    #[error("template '{id}' uses placeholder '{{{name}}}' more than once")]
    DuplicatePlaceholder { id: String, name: String },
    #[error("template '{id}' must use exactly the placeholders {expected:?}, found {found:?}")]
    PlaceholderMismatch {
        id: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("template file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template file is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

pub const PRM_TEMPLATE_ID: &str = "prm";
pub const ORM_TEMPLATE_ID: &str = "orm";
pub const POLICY_TEMPLATE_ID: &str = "policy";
pub const VALUE_TEMPLATE_ID: &str = "value";
pub const REPHRASE_TEMPLATE_ID: &str = "rephrase";
pub const MERGE_TEMPLATE_ID: &str = "merge";

/// Step-correctness judgement over a state/action pair.
pub const PRM_TEMPLATE: &str = "###You are given a math problem, followed by a step-by-step reasoning process. Your task is to read the problem carefully, understand the solving steps, and check the correctness of the last reasoning step. Output 'True' if the last step is correct, and 'False' otherwise.\n\n### State\n{state}\n\n###Action\n{option}\n\n###Assessment\n{textual reward}";

/// Whole-solution assessment including the final answer.
pub const ORM_TEMPLATE: &str = "###Assess a solution including final answer to a given math problem by following below steps.\n- Evaluate the method used for solving the problem.\n- Review each calculation step for accuracy. Check for computational errors, incorrect formula applications, or arithmetic mistakes.\n- The solution should use all the information provided in the question.\n- Examine the final answer for correctness, considering the calculations and method used.\n.\n\n### Prompt\n{prompt}\n\n###Trajectory\n{trajectory}\n\n###Assessment\n{textual reward}";

/// Chat wrapper used when exporting training pairs.
pub const POLICY_TEMPLATE: &str = "A chat between a curious user and an artificial intelligence assistant.\nThe assistant gives helpful, detailed, and polite answers to the user's questions.\nUser: {question}\nAssistant: {answer}";

/// Probability-style judgement used by the prompted value critic.
pub const VALUE_TEMPLATE: &str = "Rate the probability, as a number between 0.0 and 1.0, that the partial solution below leads to a correct final answer.\n\n### State\n{state}\n\n### Probability\n";

/// Question-rewriting instruction used by the rephrasing synthesizer.
pub const REPHRASE_TEMPLATE: &str = "Rewrite the following problem with different wording and numbers while keeping it well-posed and solvable. Output only the rewritten problem.\n\n### Problem\n{question}\n\n### Rewritten problem\n";

/// Same/different judgement used by the model-based merge predicate.
pub const MERGE_TEMPLATE: &str = "Do the following two reasoning steps express the same step? Answer 'Same' or 'Different'.\n\n### Step A\n{a}\n\n### Step B\n{b}\n\n### Answer\n";

/// A template body with `{placeholder}` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
}

fn placeholders(body: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find(['{', '}']) {
            Some(close) if after.as_bytes()[close] == b'}' => {
                found.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    found
}

/// Required placeholder sets for the built-in roles.
fn expected_placeholders(id: &str) -> Option<Vec<&'static str>> {
    match id {
        PRM_TEMPLATE_ID => Some(vec!["state", "option", "textual reward"]),
        ORM_TEMPLATE_ID => Some(vec!["prompt", "trajectory", "textual reward"]),
        POLICY_TEMPLATE_ID => Some(vec!["question", "answer"]),
        VALUE_TEMPLATE_ID => Some(vec!["state"]),
        REPHRASE_TEMPLATE_ID => Some(vec!["question"]),
        MERGE_TEMPLATE_ID => Some(vec!["a", "b"]),
        _ => None,
    }
}

/// Registry of prompt templates addressable by id.
#[derive(Clone, Debug)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// On-disk form: templates listed with their bodies, newline escapes intact.
#[derive(Serialize, Deserialize)]
struct RegistryFile {
    templates: Vec<PromptTemplate>,
}

impl TemplateRegistry {
    pub fn with_builtins() -> Self {
        let mut registry = TemplateRegistry {
            templates: BTreeMap::new(),
        };
        for (id, body) in [
            (PRM_TEMPLATE_ID, PRM_TEMPLATE),
            (ORM_TEMPLATE_ID, ORM_TEMPLATE),
            (POLICY_TEMPLATE_ID, POLICY_TEMPLATE),
            (VALUE_TEMPLATE_ID, VALUE_TEMPLATE),
            (REPHRASE_TEMPLATE_ID, REPHRASE_TEMPLATE),
            (MERGE_TEMPLATE_ID, MERGE_TEMPLATE),
        ] {
            registry
                .register(PromptTemplate {
                    id: id.to_string(),
                    body: body.to_string(),
                })
                .expect("builtin templates are well-formed");
        }
        registry
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(id)
            .ok_or_else(|| TemplateError::Unknown(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Registers (or overrides) a template after validating that every
    /// placeholder appears exactly once and that built-in roles keep their
    /// expected placeholder set.
    pub fn register(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        let found = placeholders(&template.body);
        for (i, name) in found.iter().enumerate() {
            if found[..i].contains(name) {
                return Err(TemplateError::DuplicatePlaceholder {
                    id: template.id.clone(),
                    name: name.clone(),
                });
            }
        }
        if let Some(expected) = expected_placeholders(&template.id) {
            let mut want: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
            let mut got = found.clone();
            want.sort();
            got.sort();
            if want != got {
                return Err(TemplateError::PlaceholderMismatch {
                    id: template.id.clone(),
                    expected: want,
                    found: got,
                });
            }
        }
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    /// Renders a registered template. Extra bindings are ignored; a missing
    /// binding fails with the full list of missing keys.
    pub fn render(&self, id: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        render_template(self.get(id)?, bindings)
    }

    /// Loads additional templates from a JSON registry file.
    pub fn load_file(&mut self, path: &Path) -> Result<(), TemplateError> {
        let text = std::fs::read_to_string(path)?;
        let file: RegistryFile = serde_json::from_str(&text)?;
        for template in file.templates {
            self.register(template)?;
        }
        Ok(())
    }

    /// Writes every registered template to a JSON registry file.
    pub fn save_file(&self, path: &Path) -> Result<(), TemplateError> {
        let file = RegistryFile {
            templates: self.templates.values().cloned().collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// Byte-exact single-pass substitution of `{placeholder}` slots.
pub fn render_template(
    template: &PromptTemplate,
    bindings: &[(&str, &str)],
) -> Result<String, TemplateError> {
    let slots = placeholders(&template.body);
    let missing: Vec<&String> = slots
        .iter()
        .filter(|name| !bindings.iter().any(|(k, _)| *k == name.as_str()))
        .collect();
    if !missing.is_empty() {
        let keys = missing
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(TemplateError::MissingBindings {
            id: template.id.clone(),
            keys,
        });
    }
    let mut out = String::with_capacity(template.body.len());
    let mut rest = template.body.as_str();
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find(['{', '}']) {
            Some(close) if after.as_bytes()[close] == b'}' => {
                out.push_str(&rest[..open]);
                let name = &after[..close];
                let value = bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .unwrap_or_default();
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push_str(&rest[..open + 1]);
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_template_renders_chat_pair() {
        let registry = TemplateRegistry::with_builtins();
        let rendered = registry
            .render(POLICY_TEMPLATE_ID, &[("question", "hi"), ("answer", "yo")])
            .unwrap();
        assert_eq!(
            rendered,
            "A chat between a curious user and an artificial intelligence assistant.\nThe assistant gives helpful, detailed, and polite answers to the user's questions.\nUser: hi\nAssistant: yo"
        );
    }

    #[test]
    fn prm_template_accepts_empty_option() {
        let registry = TemplateRegistry::with_builtins();
        let rendered = registry
            .render(
                PRM_TEMPLATE_ID,
                &[("state", "s"), ("option", ""), ("textual reward", "")],
            )
            .unwrap();
        assert!(rendered.contains("###Action\n\n"));
        assert!(rendered.starts_with(
            "###You are given a math problem, followed by a step-by-step reasoning process."
        ));
    }

    #[test]
    fn missing_bindings_listed() {
        let registry = TemplateRegistry::with_builtins();
        let err = registry
            .render(ORM_TEMPLATE_ID, &[("prompt", "p")])
            .unwrap_err();
        match err {
            TemplateError::MissingBindings { keys, .. } => {
                assert!(keys.contains("trajectory"));
                assert!(keys.contains("textual reward"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_placeholder_rejected_at_registration() {
        let mut registry = TemplateRegistry::with_builtins();
        let err = registry
            .register(PromptTemplate {
                id: "custom".to_string(),
                body: "{x} and {x}".to_string(),
            })
            .unwrap_err();
        assert!(matches!(err, TemplateError::DuplicatePlaceholder { .. }));
    }

    #[test]
    fn builtin_role_placeholders_enforced() {
        let mut registry = TemplateRegistry::with_builtins();
        let err = registry
            .register(PromptTemplate {
                id: PRM_TEMPLATE_ID.to_string(),
                body: "only {state} here".to_string(),
            })
            .unwrap_err();
        assert!(matches!(err, TemplateError::PlaceholderMismatch { .. }));
    }

    #[test]
    fn binding_values_are_not_rescanned() {
        let template = PromptTemplate {
            id: "t".to_string(),
            body: "{a}{b}".to_string(),
        };
        let rendered = render_template(&template, &[("a", "{b}"), ("b", "x")]).unwrap();
        assert_eq!(rendered, "{b}x");
    }

    #[test]
    fn distinct_bindings_render_distinct_bytes() {
        let registry = TemplateRegistry::with_builtins();
        let a = registry
            .render(POLICY_TEMPLATE_ID, &[("question", "p"), ("answer", "q")])
            .unwrap();
        let b = registry
            .render(POLICY_TEMPLATE_ID, &[("question", "p2"), ("answer", "q")])
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn registry_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.json");
        let registry = TemplateRegistry::with_builtins();
        registry.save_file(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Bodies are stored with literal \n escapes in the JSON file.
        assert!(text.contains("###Assessment\\n"));
        let mut fresh = TemplateRegistry::with_builtins();
        fresh.load_file(&path).unwrap();
        assert_eq!(
            fresh.get(ORM_TEMPLATE_ID).unwrap(),
            registry.get(ORM_TEMPLATE_ID).unwrap()
        );
    }
}
