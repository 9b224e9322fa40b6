//! Termination functions: the rules that decide where a generated token
//! stream stops being one option.
//!
//! Two rule-based detectors ship built in. The `newline` rule cuts after the
//! first line break, one reasoning step per option. The `formula` rule cuts
//! at a blank-line boundary (`\n\n`) only when the preceding segment looks
//! like a formula, otherwise it keeps scanning to the next blank line.
//! Regexes are compiled at registration; a bad pattern is a configuration
//! error there, never a scan-time failure.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TerminationError {
    #[error("invalid termination pattern '{pattern}': {message}")]
    InvalidPattern { pattern: String, message: String },
    #[error("termination rule '{0}' requires a pattern")]
    MissingPattern(String),
    #[error("termination rule '{0}' requires max_tokens")]
    MissingMaxTokens(String),
    #[error("unknown termination rule '{0}'")]
    UnknownRule(String),
    #[error("termination rule '{0}' is already registered")]
    Duplicate(String),
}

/// Marker that flags a trajectory-final option (`#### <answer>`).
pub const DEFAULT_TERMINAL_MARKER: &str = "####";

/// Default formula detector: a TeX-like `$...$` or `\[...\]` span, or a
/// trailing `= <number>` computation.
pub const DEFAULT_FORMULA_PATTERN: &str =
    r"\$[^$\n]*\$|\\\[[^\]]*\\\]|=\s*-?\d+(?:\.\d+)?\s*$";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    Newline,
    FormulaPattern,
    MaxTokens,
    TerminalMarker,
    Custom,
}

#[derive(Clone, Debug)]
enum Detector {
    Newline,
    FormulaPattern(Regex),
    MaxTokens(usize),
    TerminalMarker,
    Custom(Regex),
}

/// A compiled termination rule.
#[derive(Clone, Debug)]
pub struct TerminationRule {
    id: String,
    detector: Detector,
    marker: String,
}

impl TerminationRule {
    pub fn newline() -> Self {
        TerminationRule {
            id: "newline".to_string(),
            detector: Detector::Newline,
            marker: DEFAULT_TERMINAL_MARKER.to_string(),
        }
    }

    pub fn formula(id: &str, pattern: &str) -> Result<Self, TerminationError> {
        let regex = compile(pattern)?;
        Ok(TerminationRule {
            id: id.to_string(),
            detector: Detector::FormulaPattern(regex),
            marker: DEFAULT_TERMINAL_MARKER.to_string(),
        })
    }

    pub fn default_formula() -> Self {
        Self::formula("formula", DEFAULT_FORMULA_PATTERN).expect("builtin pattern compiles")
    }

    pub fn max_tokens(id: &str, cap: usize) -> Self {
        TerminationRule {
            id: id.to_string(),
            detector: Detector::MaxTokens(cap),
            marker: DEFAULT_TERMINAL_MARKER.to_string(),
        }
    }

    pub fn terminal_marker(id: &str, marker: &str) -> Self {
        TerminationRule {
            id: id.to_string(),
            detector: Detector::TerminalMarker,
            marker: marker.to_string(),
        }
    }

    pub fn custom(id: &str, pattern: &str) -> Result<Self, TerminationError> {
        let regex = compile(pattern)?;
        Ok(TerminationRule {
            id: id.to_string(),
            detector: Detector::Custom(regex),
            marker: DEFAULT_TERMINAL_MARKER.to_string(),
        })
    }

    pub fn with_marker(mut self, marker: &str) -> Self {
        self.marker = marker.to_string();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> TerminationKind {
        match self.detector {
            Detector::Newline => TerminationKind::Newline,
            Detector::FormulaPattern(_) => TerminationKind::FormulaPattern,
            Detector::MaxTokens(_) => TerminationKind::MaxTokens,
            Detector::TerminalMarker => TerminationKind::TerminalMarker,
            Detector::Custom(_) => TerminationKind::Custom,
        }
    }

    /// Marker that flags a terminal option in streams cut by this rule.
    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Stop sequences an autoregressive backend should use for this rule.
    pub fn stop_sequences(&self) -> Vec<String> {
        match self.detector {
            Detector::Newline => vec!["\n".to_string()],
            Detector::FormulaPattern(_) => vec!["\n\n".to_string()],
            _ => Vec::new(),
        }
    }

    /// Boundary text that sits at the end of an option cut by this rule.
    pub fn boundary_text(&self) -> &str {
        match self.detector {
            Detector::Newline => "\n",
            Detector::FormulaPattern(_) => "\n\n",
            _ => "",
        }
    }
}

fn compile(pattern: &str) -> Result<Regex, TerminationError> {
    Regex::new(pattern).map_err(|e| TerminationError::InvalidPattern {
        pattern: pattern.to_string(),
        message: e.to_string(),
    })
}

/// Scans a stream for the first termination boundary under `rule`.
///
/// Returns the byte index one past the boundary, or `None` when the stream
/// holds no boundary yet. A returned index is always in `1..=stream.len()`.
pub fn scan_termination(stream: &str, rule: &TerminationRule) -> Option<usize> {
    match &rule.detector {
        Detector::Newline => stream.find('\n').map(|i| i + 1),
        Detector::FormulaPattern(regex) => {
            let mut pos = 0;
            while let Some(rel) = stream[pos..].find("\n\n") {
                let segment = &stream[pos..pos + rel];
                let end = pos + rel + 2;
                if regex.is_match(segment) {
                    return Some(end);
                }
                pos = end;
            }
            None
        }
        Detector::MaxTokens(cap) => {
            if *cap == 0 {
                return None;
            }
            let mut tokens = 0usize;
            let mut in_token = false;
            for (i, ch) in stream.char_indices() {
                if ch.is_whitespace() {
                    if in_token {
                        tokens += 1;
                        if tokens == *cap {
                            return Some(i);
                        }
                        in_token = false;
                    }
                } else {
                    in_token = true;
                }
            }
            if in_token && tokens + 1 == *cap {
                return Some(stream.len());
            }
            None
        }
        Detector::TerminalMarker => {
            let at = stream.find(&rule.marker)?;
            let after = at + rule.marker.len();
            match stream[after..].find('\n') {
                Some(nl) => Some(after + nl + 1),
                None => Some(stream.len()),
            }
        }
        Detector::Custom(regex) => regex
            .find_iter(stream)
            .find(|m| m.end() > 0)
            .map(|m| m.end()),
    }
}

/// Splits a complete stream into option-sized segments by repeated scanning.
///
/// Concatenating the segments reproduces the stream byte-exactly; the final
/// segment is whatever trails the last boundary, if anything.
pub fn segment_stream<'a>(stream: &'a str, rule: &TerminationRule) -> Vec<&'a str> {
    let mut segments = Vec::new();
    let mut rest = stream;
    while let Some(boundary) = scan_termination(rest, rule) {
        segments.push(&rest[..boundary]);
        rest = &rest[boundary..];
    }
    if !rest.is_empty() {
        segments.push(rest);
    }
    segments
}

/// Config-file form of a termination rule, compiled on registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminationSpec {
    pub id: String,
    pub kind: TerminationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
}

/// Registry of termination rules addressable by id. Ships with the built-in
/// `newline` and `formula` rules.
#[derive(Clone, Debug)]
pub struct TerminationRegistry {
    rules: BTreeMap<String, Arc<TerminationRule>>,
}

impl Default for TerminationRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl TerminationRegistry {
    pub fn with_builtins() -> Self {
        let mut rules = BTreeMap::new();
        let newline = TerminationRule::newline();
        let formula = TerminationRule::default_formula();
        rules.insert(newline.id.clone(), Arc::new(newline));
        rules.insert(formula.id.clone(), Arc::new(formula));
        TerminationRegistry { rules }
    }

    pub fn get(&self, id: &str) -> Result<Arc<TerminationRule>, TerminationError> {
        self.rules
            .get(id)
            .cloned()
            .ok_or_else(|| TerminationError::UnknownRule(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }

    /// Compiles and registers a rule from its config form. Built-in ids may
    /// be overridden; registering the same custom id twice is an error.
    pub fn register(&mut self, spec: &TerminationSpec) -> Result<(), TerminationError> {
        let mut rule = match spec.kind {
            TerminationKind::Newline => TerminationRule::newline(),
            TerminationKind::FormulaPattern => {
                let pattern = spec
                    .pattern
                    .as_deref()
                    .unwrap_or(DEFAULT_FORMULA_PATTERN);
                TerminationRule::formula(&spec.id, pattern)?
            }
            TerminationKind::MaxTokens => {
                let cap = spec
                    .max_tokens
                    .ok_or_else(|| TerminationError::MissingMaxTokens(spec.id.clone()))?;
                TerminationRule::max_tokens(&spec.id, cap)
            }
            TerminationKind::TerminalMarker => TerminationRule::terminal_marker(
                &spec.id,
                spec.marker.as_deref().unwrap_or(DEFAULT_TERMINAL_MARKER),
            ),
            TerminationKind::Custom => {
                let pattern = spec
                    .pattern
                    .as_deref()
                    .ok_or_else(|| TerminationError::MissingPattern(spec.id.clone()))?;
                TerminationRule::custom(&spec.id, pattern)?
            }
        };
        rule.id = spec.id.clone();
        if let Some(marker) = &spec.marker {
            rule.marker = marker.clone();
        }
        let builtin = matches!(spec.id.as_str(), "newline" | "formula");
        if !builtin && self.rules.contains_key(&spec.id) {
            return Err(TerminationError::Duplicate(spec.id.clone()));
        }
        self.rules.insert(spec.id.clone(), Arc::new(rule));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newline_scan_examples() {
        let rule = TerminationRule::newline();
        assert_eq!(scan_termination("abc", &rule), None);
        assert_eq!(scan_termination("a\nb", &rule), Some(2));
        assert_eq!(scan_termination("\nx", &rule), Some(1));
    }

    #[test]
    fn formula_scan_skips_plain_segments() {
        let rule = TerminationRule::formula("formula", r"\$.*\$").unwrap();
        let stream = "text\n\nno-formula\n\n$y=1$\n\n";
        // "text" (6 bytes incl the blank line) and "no-formula" (12) do not
        // match; "$y=1$" (7 + 2) does, so the boundary is the full length.
        assert_eq!(scan_termination(stream, &rule), Some(stream.len()));
        assert_eq!(scan_termination("plain\n\nstill plain\n\n", &rule), None);
    }

    #[test]
    fn default_formula_pattern_cases() {
        let rule = TerminationRule::default_formula();
        assert_eq!(
            scan_termination("so $x=3$ holds\n\nrest", &rule),
            Some("so $x=3$ holds\n\n".len())
        );
        assert_eq!(
            scan_termination("compute 4 + 3 = 7\n\nrest", &rule),
            Some("compute 4 + 3 = 7\n\n".len())
        );
        assert_eq!(scan_termination("just words here\n\nrest", &rule), None);
    }

    #[test]
    fn max_tokens_counts_whitespace_delimited_spans() {
        let rule = TerminationRule::max_tokens("cap", 2);
        assert_eq!(scan_termination("one two three", &rule), Some(7));
        assert_eq!(scan_termination("one two", &rule), Some(7));
        assert_eq!(scan_termination("one", &rule), None);
    }

    #[test]
    fn terminal_marker_cuts_past_marker_line() {
        let rule = TerminationRule::terminal_marker("answer", "####");
        assert_eq!(scan_termination("x = 2\n#### 2\nrest", &rule), Some(13));
        assert_eq!(scan_termination("#### 7", &rule), Some(6));
        assert_eq!(scan_termination("no marker", &rule), None);
    }

    #[test]
    fn custom_rule_uses_match_end() {
        let rule = TerminationRule::custom("period", r"\.\s").unwrap();
        assert_eq!(scan_termination("Done. Next", &rule), Some(6));
    }

    #[test]
    fn bad_pattern_fails_at_registration() {
        let mut registry = TerminationRegistry::with_builtins();
        let spec = TerminationSpec {
            id: "broken".to_string(),
            kind: TerminationKind::Custom,
            pattern: Some("([unclosed".to_string()),
            marker: None,
            max_tokens: None,
        };
        assert!(matches!(
            registry.register(&spec),
            Err(TerminationError::InvalidPattern { .. })
        ));
    }

    #[test]
    fn registry_builtins_and_duplicates() {
        let mut registry = TerminationRegistry::with_builtins();
        assert!(registry.get("newline").is_ok());
        assert!(registry.get("formula").is_ok());
        assert!(registry.get("nope").is_err());
        let spec = TerminationSpec {
            id: "sentence".to_string(),
            kind: TerminationKind::Custom,
            pattern: Some(r"\. ".to_string()),
            marker: None,
            max_tokens: None,
        };
        registry.register(&spec).unwrap();
        assert!(matches!(
            registry.register(&spec),
            Err(TerminationError::Duplicate(_))
        ));
    }

    #[test]
    fn segmentation_is_lossless() {
        let rule = TerminationRule::newline();
        let stream = "one\ntwo\nthree\n#### 9";
        let segments = segment_stream(stream, &rule);
        assert_eq!(segments, vec!["one\n", "two\n", "three\n", "#### 9"]);
        assert_eq!(segments.concat(), stream);
    }

    #[test]
    fn boundaries_stay_in_range() {
        let rule = TerminationRule::newline();
        for stream in ["", "\n", "a\n\nb", "abc\ndef\n"] {
            let mut rest = stream;
            while let Some(b) = scan_termination(rest, &rule) {
                assert!(b >= 1 && b <= rest.len());
                rest = &rest[b..];
            }
        }
    }
}
