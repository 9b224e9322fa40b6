//! Abstractions over the generation policy, the fast-rollout policy, and the
//! plumbing that cuts raw token streams into options.
//!
//! A generator produces one option per call, ending exactly at a termination
//! boundary (or flagged terminal). A fast-rollout policy completes a state
//! all the way to a terminal condition so outcome critics can score it.

use crate::termination::{scan_termination, segment_stream, TerminationError, TerminationRule};
use crate::types::{OptionStep, SearchState, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    /// A backend call failed after the configured retries.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("generation produced no text after retries")]
    GenerationExhausted,
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl PolicyError {
    /// True for failures that abort a search but leave the partial tree usable.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            PolicyError::Transport { .. }
                | PolicyError::GenerationExhausted
                | PolicyError::Backend(_)
        )
    }
}

/// The generation policy: produce one option from a state.
pub trait OptionGenerator: Send + Sync {
    fn generate(
        &self,
        state: &SearchState,
        temperature: f64,
        rule: &TerminationRule,
        max_tokens: u32,
    ) -> Result<OptionStep, PolicyError>;
}

/// The fast-rollout policy: complete a state to a terminal trajectory.
pub trait FastRolloutPolicy: Send + Sync {
    fn rollout(&self, state: &SearchState) -> Result<Trajectory, PolicyError>;
}

/// Plain text completion, used by prompt-driven critics and synthesizers.
pub trait TextCompleter: Send + Sync {
    fn complete_text(
        &self,
        prompt: &str,
        temperature: f64,
        max_tokens: u32,
        stop: &[String],
    ) -> Result<String, PolicyError>;
}

/// Samples one option and enforces the generator contract: the boundary
/// names the rule, the text ends exactly at a rule boundary unless the
/// option is terminal, and an emitted terminal marker forces the flag.
pub fn generate_option(
    gen: &dyn OptionGenerator,
    state: &SearchState,
    temperature: f64,
    rule: &TerminationRule,
    max_tokens: u32,
) -> Result<OptionStep, PolicyError> {
    if temperature < 0.0 {
        return Err(PolicyError::Contract(format!(
            "temperature must be >= 0, got {temperature}"
        )));
    }
    if state.is_terminal() {
        return Err(PolicyError::Contract(
            "cannot generate from a terminal state".to_string(),
        ));
    }
    let option = gen.generate(state, temperature, rule, max_tokens)?;
    if option.boundary != rule.id() {
        return Err(PolicyError::Contract(format!(
            "generator tagged boundary '{}' but rule is '{}'",
            option.boundary,
            rule.id()
        )));
    }
    if option.text.contains(rule.marker()) && !option.is_terminal {
        return Err(PolicyError::Contract(
            "option carries the terminal marker but is not flagged terminal".to_string(),
        ));
    }
    if !option.is_terminal && scan_termination(&option.text, rule) != Some(option.text.len()) {
        return Err(PolicyError::Contract(
            "non-terminal option does not end at a rule boundary".to_string(),
        ));
    }
    Ok(option)
}

/// Completes `state` to a trajectory, returning the state unchanged when it
/// is already terminal. The returned option list always starts with the
/// state's own options.
pub fn fast_rollout(
    fr: &dyn FastRolloutPolicy,
    state: &SearchState,
) -> Result<Trajectory, PolicyError> {
    if state.is_terminal() {
        return Ok(Trajectory {
            prompt: state.prompt().clone(),
            options: state.options().to_vec(),
            terminal: true,
            critic_score: None,
            final_reward: None,
        });
    }
    let trajectory = fr.rollout(state)?;
    let prefix_ok = trajectory.options.len() >= state.depth()
        && trajectory.options[..state.depth()] == *state.options();
    if !prefix_ok {
        return Err(PolicyError::Contract(
            "rollout options do not extend the state's options".to_string(),
        ));
    }
    Ok(trajectory)
}

/// Cuts the first option out of a raw stream.
///
/// When the stream holds no boundary (the backend signalled end-of-sequence
/// or the token cap struck first) the whole remainder becomes a terminal
/// option, since nothing can follow it.
pub fn cut_option(stream: &str, rule: &TerminationRule) -> OptionStep {
    match scan_termination(stream, rule) {
        Some(boundary) => {
            let text = &stream[..boundary];
            OptionStep {
                text: text.to_string(),
                boundary: rule.id().to_string(),
                is_terminal: text.contains(rule.marker()),
            }
        }
        None => OptionStep {
            text: stream.to_string(),
            boundary: rule.id().to_string(),
            is_terminal: true,
        },
    }
}

/// Splits a full continuation into options.
///
/// Returns the options and whether a terminal marker was seen; a capped
/// continuation without a marker yields a non-terminal tail.
pub fn continuation_to_options(
    continuation: &str,
    rule: &TerminationRule,
) -> (Vec<OptionStep>, bool) {
    let mut terminal_seen = false;
    let mut options = Vec::new();
    for segment in segment_stream(continuation, rule) {
        if terminal_seen {
            break;
        }
        let is_terminal = segment.contains(rule.marker());
        terminal_seen |= is_terminal;
        options.push(OptionStep {
            text: segment.to_string(),
            boundary: rule.id().to_string(),
            is_terminal,
        });
    }
    (options, terminal_seen)
}

/// Extracts the answer following the last terminal marker, trimmed to the
/// end of its line.
pub fn extract_marker_answer(text: &str, marker: &str) -> Option<String> {
    let at = text.rfind(marker)?;
    let after = &text[at + marker.len()..];
    let line = after.lines().next().unwrap_or(after);
    let answer = line.trim();
    if answer.is_empty() {
        None
    } else {
        Some(answer.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::termination::TerminationRule;
    use crate::types::{render_state, PromptText};

    #[test]
    fn cut_takes_first_boundary() {
        let rule = TerminationRule::newline();
        let option = cut_option("step one\nstep two\n", &rule);
        assert_eq!(option.text, "step one\n");
        assert_eq!(option.boundary, "newline");
        assert!(!option.is_terminal);
    }

    #[test]
    fn cut_without_boundary_is_terminal() {
        let rule = TerminationRule::newline();
        let option = cut_option("#### 10", &rule);
        assert!(option.is_terminal);
        assert_eq!(option.text, "#### 10");
    }

    #[test]
    fn formula_cut_ends_after_matching_segment() {
        let rule = TerminationRule::formula("formula", r"\$.*\$").unwrap();
        let option = cut_option("...\n\n$x=3$\n\nmore", &rule);
        assert_eq!(option.text, "...\n\n$x=3$\n\n");
    }

    // Fixture transcribed from a published GSM-style rollout example.
    const SANDY_ROLLOUT: &str = "The sum of Sandy's age now and 2 years is 36. The sum of Kim's age now and two years is x + 2.\n36 = 3(x + 2)\n6 = 3x + 6\n3x = 30\nx = 10\n #### 10";

    #[test]
    fn rollout_fixture_splits_and_reassembles() {
        let rule = TerminationRule::newline();
        let (options, terminal) = continuation_to_options(SANDY_ROLLOUT, &rule);
        assert!(terminal);
        let rebuilt: String = options.iter().map(|o| o.text.as_str()).collect();
        assert_eq!(rebuilt, SANDY_ROLLOUT);
        assert!(options.last().unwrap().is_terminal);
        assert_eq!(
            extract_marker_answer(SANDY_ROLLOUT, "####").as_deref(),
            Some("10")
        );
    }

    #[test]
    fn capped_continuation_is_not_terminal() {
        let rule = TerminationRule::newline();
        let (options, terminal) = continuation_to_options("a\nb\ncut off mid", &rule);
        assert!(!terminal);
        assert_eq!(options.len(), 3);
        assert!(!options.last().unwrap().is_terminal);
    }

    struct Scripted(&'static str);

    impl OptionGenerator for Scripted {
        fn generate(
            &self,
            _state: &SearchState,
            _temperature: f64,
            rule: &TerminationRule,
            _max_tokens: u32,
        ) -> Result<OptionStep, PolicyError> {
            Ok(cut_option(self.0, rule))
        }
    }

    struct ScriptedRollout(&'static str);

    impl FastRolloutPolicy for ScriptedRollout {
        fn rollout(&self, state: &SearchState) -> Result<Trajectory, PolicyError> {
            let rule = TerminationRule::newline();
            let (new_options, terminal) = continuation_to_options(self.0, &rule);
            let mut options = state.options().to_vec();
            options.extend(new_options);
            Ok(Trajectory {
                prompt: state.prompt().clone(),
                options,
                terminal,
                critic_score: None,
                final_reward: None,
            })
        }
    }

    #[test]
    fn generate_option_enforces_contract() {
        let prompt = PromptText::new("Q\n").unwrap();
        let state = render_state(&prompt, &[]);
        let rule = TerminationRule::newline();
        let option = generate_option(&Scripted("step one\nstep two\n"), &state, 0.8, &rule, 64)
            .unwrap();
        assert_eq!(option.text, "step one\n");
        assert!(generate_option(&Scripted("x\n"), &state, -0.1, &rule, 64).is_err());
    }

    #[test]
    fn fast_rollout_is_idempotent_on_terminal_states() {
        let prompt = PromptText::new("Q\n").unwrap();
        let terminal_option = OptionStep::new("#### 4", "newline", true).unwrap();
        let state = render_state(&prompt, std::slice::from_ref(&terminal_option));
        let traj = fast_rollout(&ScriptedRollout("ignored"), &state).unwrap();
        assert!(traj.terminal);
        assert_eq!(traj.options, vec![terminal_option]);
    }

    #[test]
    fn fast_rollout_extends_state_prefix() {
        let prompt = PromptText::new("Q\n").unwrap();
        let first = OptionStep::new("partial\n", "newline", false).unwrap();
        let state = render_state(&prompt, std::slice::from_ref(&first));
        let traj = fast_rollout(&ScriptedRollout(SANDY_ROLLOUT), &state).unwrap();
        assert!(traj.terminal);
        assert_eq!(traj.options[0], first);
        assert!(traj.rendered().ends_with("#### 10"));
    }

    #[test]
    fn marker_answer_extraction() {
        assert_eq!(extract_marker_answer("x\n#### 42\n", "####").as_deref(), Some("42"));
        assert_eq!(extract_marker_answer("no marker", "####"), None);
        assert_eq!(extract_marker_answer("#### ", "####"), None);
    }
}
