//! The three critics that guide the search — a value function over states, a
//! process reward model (PRM) judging single steps, and an outcome reward
//! model (ORM) judging whole trajectories — plus score aggregation, critic
//! training-set construction, and the precision/recall/calibration harness.

use crate::backends::templates::{TemplateError, TemplateRegistry, ORM_TEMPLATE_ID, PRM_TEMPLATE_ID};
use crate::policy::{
    extract_marker_answer, generate_option, OptionGenerator, PolicyError, TextCompleter,
};
use crate::termination::{TerminationRule, DEFAULT_TERMINAL_MARKER};
use crate::types::{render_state, OptionStep, PromptText, SearchState, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("critic backend error: {0}")]
    Backend(String),
    #[error("tool verifier failed: {0}")]
    Tool(String),
    #[error("need at least {needed} labeled states, got {got}")]
    TooFewLabeled { needed: usize, got: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset export failed: {0}")]
    Io(#[from] std::io::Error),
}

impl CriticError {
    pub fn is_backend_failure(&self) -> bool {
        match self {
            CriticError::Policy(p) => p.is_backend_failure(),
            CriticError::Backend(_) => true,
            _ => false,
        }
    }
}

/// Weights of the three critic terms in the final node score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticWeights {
    pub value: f64,
    pub prm: f64,
    pub orm: f64,
}

impl Default for CriticWeights {
    fn default() -> Self {
        // All three terms weighted 1.0, the reference setting.
        CriticWeights {
            value: 1.0,
            prm: 1.0,
            orm: 1.0,
        }
    }
}

impl CriticWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("value", self.value), ("prm", self.prm), ("orm", self.orm)] {
            if w < 0.0 || !w.is_finite() {
                return Err(format!("weight_{name} must be finite and >= 0, got {w}"));
            }
        }
        if self.value == 0.0 && self.prm == 0.0 && self.orm == 0.0 {
            return Err("critic weights must not all be zero".to_string());
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.value + self.prm + self.orm
    }
}

/// Verdict of the process reward model on one (state, option) pair.
///
/// The scalar is 1.0 iff the first alphabetic token of the raw response is
/// "true" (case-insensitive); anything else, including an unparseable
/// response, maps to 0.0. `parse_warning` marks responses with no
/// alphabetic token at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmVerdict {
    pub raw_text: String,
    pub scalar: f64,
    pub parse_warning: bool,
}

/// Verdict of the outcome reward model on a full trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrmVerdict {
    pub raw_text: String,
    pub scalar: f64,
    /// True only when a tool verifier decided the scalar.
    pub tool_checked: bool,
    pub parse_warning: bool,
}

fn alphabetic_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
}

/// Maps a PRM response to its scalar verdict.
pub fn parse_prm_verdict(raw: &str) -> PrmVerdict {
    match alphabetic_tokens(raw).next() {
        Some(token) => PrmVerdict {
            raw_text: raw.to_string(),
            scalar: f64::from(token.eq_ignore_ascii_case("true")),
            parse_warning: false,
        },
        None => PrmVerdict {
            raw_text: raw.to_string(),
            scalar: 0.0,
            parse_warning: true,
        },
    }
}

/// Maps an ORM response to its scalar verdict: a trailing
/// `Judgement: True/False` wins, otherwise the first "true"/"false" token
/// anywhere, otherwise 0.0 with a parse warning.
pub fn parse_orm_verdict(raw: &str) -> OrmVerdict {
    let lowered = raw.to_lowercase();
    let verdict_token = lowered
        .rfind("judgement:")
        .and_then(|at| alphabetic_tokens(&lowered[at + "judgement:".len()..]).next())
        .filter(|t| *t == "true" || *t == "false")
        .map(str::to_string)
        .or_else(|| {
            alphabetic_tokens(&lowered)
                .find(|t| *t == "true" || *t == "false")
                .map(str::to_string)
        });
    match verdict_token {
        Some(token) => OrmVerdict {
            raw_text: raw.to_string(),
            scalar: f64::from(token == "true"),
            tool_checked: false,
            parse_warning: false,
        },
        None => OrmVerdict {
            raw_text: raw.to_string(),
            scalar: 0.0,
            tool_checked: false,
            parse_warning: true,
        },
    }
}

/// Value function: expected final reward from a state, in [0, 1].
pub trait ValueCritic: Send + Sync {
    fn value(&self, state: &SearchState) -> Result<f64, CriticError>;
}

/// Process reward model: is the last step correct?
pub trait ProcessCritic: Send + Sync {
    fn assess(&self, state: &SearchState, option: &OptionStep) -> Result<PrmVerdict, CriticError>;
}

/// Outcome reward model: does the whole trajectory succeed?
pub trait OutcomeCritic: Send + Sync {
    fn assess(&self, prompt: &PromptText, trajectory: &Trajectory)
        -> Result<OrmVerdict, CriticError>;
}

/// External checker that can decide a trajectory's final answer exactly.
pub trait ToolVerifier: Send + Sync {
    fn verify(&self, prompt: &PromptText, trajectory: &Trajectory) -> Result<bool, CriticError>;
}

/// Ground-truth reward for a terminal trajectory, in {0, 1}.
pub trait RewardOracle: Send + Sync {
    fn final_reward(&self, trajectory: &Trajectory) -> Result<f64, CriticError>;
}

/// The three evaluators plus their aggregation weights.
#[derive(Clone)]
pub struct CriticBundle {
    pub value: Arc<dyn ValueCritic>,
    pub prm: Arc<dyn ProcessCritic>,
    pub orm: Arc<dyn OutcomeCritic>,
    pub weights: CriticWeights,
}

impl CriticBundle {
    pub fn new(
        value: Arc<dyn ValueCritic>,
        prm: Arc<dyn ProcessCritic>,
        orm: Arc<dyn OutcomeCritic>,
        weights: CriticWeights,
    ) -> Result<Self, CriticError> {
        weights.validate().map_err(CriticError::Contract)?;
        Ok(CriticBundle {
            value,
            prm,
            orm,
            weights,
        })
    }
}

/// Itemized final score of a node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub total: f64,
    pub value_term: f64,
    pub prm_term: f64,
    pub orm_term: f64,
    pub orm_sample_count: usize,
    /// Set when no outcome samples were available; the term is then zero.
    pub orm_missing: bool,
}

/// Weighted sum of the three critic signals:
/// `w_value * v + w_prm * prm + w_orm * mean(orm_samples)`.
///
/// An empty sample list contributes a zero outcome term and sets the
/// `orm_missing` flag.
pub fn aggregate_score(
    value: f64,
    prm: f64,
    orm_samples: &[f64],
    weights: &CriticWeights,
) -> ScoreBreakdown {
    let orm_mean = if orm_samples.is_empty() {
        0.0
    } else {
        orm_samples.iter().sum::<f64>() / orm_samples.len() as f64
    };
    let value_term = weights.value * value;
    let prm_term = weights.prm * prm;
    let orm_term = weights.orm * orm_mean;
    ScoreBreakdown {
        total: value_term + prm_term + orm_term,
        value_term,
        prm_term,
        orm_term,
        orm_sample_count: orm_samples.len(),
        orm_missing: orm_samples.is_empty(),
    }
}

/// Suffix appended (behind a flag) to ORM prompts so responses end with a
/// parseable judgement line. The registered template itself stays pristine.
pub const ORM_JUDGEMENT_SUFFIX: &str =
    "\nEnd your assessment with \"Judgement: True\" or \"Judgement: False\".";

/// Renders the PRM template over (state, option) and asks the backend for a
/// verdict. The reward slot is left empty for the model to fill.
pub fn prm_assess(
    completer: &dyn TextCompleter,
    templates: &TemplateRegistry,
    state: &SearchState,
    option: &OptionStep,
) -> Result<PrmVerdict, CriticError> {
    let prompt = templates.render(
        PRM_TEMPLATE_ID,
        &[
            ("state", state.rendered()),
            ("option", &option.text),
            ("textual reward", ""),
        ],
    )?;
    let response = completer.complete_text(&prompt, 0.0, 16, &["\n".to_string()])?;
    Ok(parse_prm_verdict(&response))
}

/// Renders the ORM template over (prompt, trajectory) and asks the backend
/// for a verdict. When a tool verifier is supplied and the trajectory
/// exposes a final answer, the tool's decision overrides the scalar; tool
/// failures fall back to the model verdict.
pub fn orm_assess(
    completer: &dyn TextCompleter,
    templates: &TemplateRegistry,
    prompt: &PromptText,
    trajectory: &Trajectory,
    tool: Option<&dyn ToolVerifier>,
    append_judgement_suffix: bool,
) -> Result<OrmVerdict, CriticError> {
    let mut rendered = templates.render(
        ORM_TEMPLATE_ID,
        &[
            ("prompt", prompt.as_str()),
            ("trajectory", &trajectory.rendered_options()),
            ("textual reward", ""),
        ],
    )?;
    if append_judgement_suffix {
        rendered.push_str(ORM_JUDGEMENT_SUFFIX);
    }
    let response = completer.complete_text(&rendered, 0.0, 256, &[])?;
    let mut verdict = parse_orm_verdict(&response);
    let has_answer =
        extract_marker_answer(&trajectory.rendered_options(), DEFAULT_TERMINAL_MARKER).is_some();
    if let (Some(tool), true) = (tool, has_answer) {
        match tool.verify(prompt, trajectory) {
            Ok(correct) => {
                verdict.scalar = f64::from(correct);
                verdict.tool_checked = true;
                verdict.parse_warning = false;
            }
            Err(_) => {
                verdict.tool_checked = false;
            }
        }
    }
    Ok(verdict)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueExample {
    pub state: String,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmExample {
    pub state: String,
    pub option: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrmExample {
    pub prompt: String,
    pub trajectory: String,
    pub label: String,
}

/// Training sets for the three critics, built from sampled trajectories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticDatasetBundle {
    pub d_value: Vec<ValueExample>,
    pub d_prm: Vec<PrmExample>,
    pub d_orm: Vec<OrmExample>,
}

impl CriticDatasetBundle {
    /// Writes all three sets as JSONL records tagged by kind. The outcome
    /// records store the prompt in the `state` field (the initial state is
    /// the prompt).
    pub fn export_jsonl(&self, path: &Path) -> Result<(), CriticError> {
        let mut file = std::fs::File::create(path)?;
        for ex in &self.d_value {
            let record = serde_json::json!({
                "kind": "value",
                "state": ex.state,
                "label": ex.target,
            });
            writeln!(file, "{record}")?;
        }
        for ex in &self.d_prm {
            let record = serde_json::json!({
                "kind": "prm",
                "state": ex.state,
                "option": ex.option,
                "label": ex.label,
            });
            writeln!(file, "{record}")?;
        }
        for ex in &self.d_orm {
            let record = serde_json::json!({
                "kind": "orm",
                "state": ex.prompt,
                "trajectory": ex.trajectory,
                "label": ex.label,
            });
            writeln!(file, "{record}")?;
        }
        Ok(())
    }
}

fn label_text(good: bool) -> String {
    if good { "True" } else { "False" }.to_string()
}

/// Samples one trajectory by repeatedly generating options until a terminal
/// option or the step cap.
pub fn sample_trajectory(
    gen: &dyn OptionGenerator,
    prompt: &PromptText,
    rule: &TerminationRule,
    temperature: f64,
    max_tokens: u32,
    max_steps: usize,
) -> Result<Trajectory, CriticError> {
    let mut state = render_state(prompt, &[]);
    let mut terminal = false;
    for _ in 0..max_steps {
        let option = generate_option(gen, &state, temperature, rule, max_tokens)?;
        let is_terminal = option.is_terminal;
        state = state.child(option);
        if is_terminal {
            terminal = true;
            break;
        }
    }
    Ok(Trajectory {
        prompt: prompt.clone(),
        options: state.options().to_vec(),
        terminal,
        critic_score: None,
        final_reward: None,
    })
}

/// Builds the three critic training sets.
///
/// For each prompt, `samples_per_prompt` trajectories are drawn; non-terminal
/// samples are dropped, and a prompt with no terminal sample is skipped with
/// a warning. Every prefix state inherits the trajectory's final reward as
/// its value target. A step is labeled "True" when the Monte-Carlo value of
/// its post-option prefix — the mean reward over the samples sharing that
/// prefix — exceeds `prm_threshold`. Outcome labels restate final rewards.
#[allow(clippy::too_many_arguments)]
pub fn build_critic_datasets(
    prompts: &[PromptText],
    gen: &dyn OptionGenerator,
    rule: &TerminationRule,
    temperature: f64,
    max_tokens: u32,
    max_steps: usize,
    reward_oracle: &dyn RewardOracle,
    samples_per_prompt: usize,
    prm_threshold: f64,
) -> Result<(CriticDatasetBundle, Vec<String>), CriticError> {
    if samples_per_prompt == 0 {
        return Err(CriticError::Contract(
            "samples_per_prompt must be >= 1".to_string(),
        ));
    }
    let mut bundle = CriticDatasetBundle::default();
    let mut warnings = Vec::new();
    for prompt in prompts {
        let mut samples = Vec::new();
        for _ in 0..samples_per_prompt {
            let traj = sample_trajectory(gen, prompt, rule, temperature, max_tokens, max_steps)?;
            if !traj.terminal {
                continue;
            }
            let reward = reward_oracle.final_reward(&traj)?;
            samples.push((traj, reward));
        }
        if samples.is_empty() {
            warnings.push(format!(
                "prompt skipped, no terminal trajectory in {samples_per_prompt} samples: {}",
                prompt.as_str()
            ));
            continue;
        }

        // Monte-Carlo prefix values: mean reward over samples sharing the
        // rendered prefix that includes the assessed option.
        let mut prefix_stats: HashMap<String, (f64, u32)> = HashMap::new();
        for (traj, reward) in &samples {
            let mut rendered = prompt.as_str().to_string();
            for option in &traj.options {
                rendered.push_str(&option.text);
                let entry = prefix_stats.entry(rendered.clone()).or_insert((0.0, 0));
                entry.0 += reward;
                entry.1 += 1;
            }
        }

        for (traj, reward) in &samples {
            let mut before = prompt.as_str().to_string();
            for option in &traj.options {
                bundle.d_value.push(ValueExample {
                    state: before.clone(),
                    target: *reward,
                });
                let mut after = before.clone();
                after.push_str(&option.text);
                let (sum, count) = prefix_stats[&after];
                let mc_value = sum / f64::from(count);
                bundle.d_prm.push(PrmExample {
                    state: before.clone(),
                    option: option.text.clone(),
                    label: label_text(mc_value > prm_threshold),
                });
                before = after;
            }
            bundle.d_orm.push(OrmExample {
                prompt: prompt.as_str().to_string(),
                trajectory: traj.rendered_options(),
                label: label_text(*reward >= 0.5),
            });
        }
    }
    Ok((bundle, warnings))
}

/// Precision, recall, and expected calibration error of a critic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEvalReport {
    pub precision: f64,
    pub recall: f64,
    pub ece: f64,
}

/// Computes the report from (score, truth) pairs.
///
/// Decisions use a 0.5 threshold with ties scoring positive; an empty
/// denominator yields 0. ECE uses 10 equal-width confidence bins.
pub fn evaluate_scores(scored: &[(f64, f64)]) -> CriticEvalReport {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut bins = [(0.0f64, 0.0f64, 0usize); 10]; // (score sum, truth sum, count)
    for (score, truth) in scored {
        let predicted = *score >= 0.5;
        let actual = *truth >= 0.5;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        let bin = ((score * 10.0).floor() as usize).min(9);
        bins[bin].0 += score;
        bins[bin].1 += truth;
        bins[bin].2 += 1;
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let n = scored.len() as f64;
    let ece = bins
        .iter()
        .filter(|(_, _, count)| *count > 0)
        .map(|(score_sum, truth_sum, count)| {
            let confidence = score_sum / *count as f64;
            let accuracy = truth_sum / *count as f64;
            (*count as f64 / n) * (accuracy - confidence).abs()
        })
        .sum();
    CriticEvalReport {
        precision,
        recall,
        ece,
    }
}

/// Evaluates the bundle's value critic against labeled states.
pub fn evaluate_critics(
    bundle: &CriticBundle,
    labeled_states: &[(SearchState, f64)],
) -> Result<CriticEvalReport, CriticError> {
    if labeled_states.len() < 10 {
        return Err(CriticError::TooFewLabeled {
            needed: 10,
            got: labeled_states.len(),
        });
    }
    let mut scored = Vec::with_capacity(labeled_states.len());
    for (state, truth) in labeled_states {
        scored.push((bundle.value.value(state)?, *truth));
    }
    Ok(evaluate_scores(&scored))
}
