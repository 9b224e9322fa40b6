//! Blocking client for OpenAI-compatible completion endpoints, plus the
//! generator, fast-rollout, and critic implementations built on it.
//!
//! Requests POST to `/v1/completions` with `{model, prompt, temperature,
//! max_tokens, stop}`. 4xx responses are non-retryable configuration
//! errors; 5xx and transport failures retry with exponential backoff and
//! jitter up to the configured limit. An internal counting semaphore keeps
//! at most `max_parallel` requests in flight. The API key is read from the
//! named environment variable and never logged or echoed.

use crate::backends::templates::{TemplateRegistry, MERGE_TEMPLATE_ID, VALUE_TEMPLATE_ID};
use crate::critics::{
    orm_assess, prm_assess, CriticError, OrmVerdict, OutcomeCritic, PrmVerdict, ProcessCritic,
    ToolVerifier, ValueCritic,
};
use crate::merge::{MergeError, MergeJudge};
use crate::policy::{
    continuation_to_options, FastRolloutPolicy, OptionGenerator, PolicyError, TextCompleter,
};
use crate::termination::{scan_termination, TerminationRule};
use crate::types::{OptionStep, PromptText, SearchState, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl From<HttpError> for PolicyError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Transport { attempts, message } => {
                PolicyError::Transport { attempts, message }
            }
            other => PolicyError::Backend(other.to_string()),
        }
    }
}

impl From<HttpError> for CriticError {
    fn from(e: HttpError) -> Self {
        CriticError::Policy(e.into())
    }
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallel() -> u32 {
    4
}
fn default_backoff() -> u64 {
    250
}
fn default_policy_temp() -> f64 {
    0.8
}
fn default_fast_temp() -> f64 {
    0.8
}
fn default_critic_temp() -> f64 {
    0.0
}

/// Connection settings for one completion endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: u32,
    /// Base backoff between retries; doubled per attempt plus jitter.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_policy_temp")]
    pub temperature_policy: f64,
    #[serde(default = "default_fast_temp")]
    pub temperature_fast: f64,
    #[serde(default = "default_critic_temp")]
    pub temperature_critic: f64,
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    available: Mutex<u32>,
    signal: Condvar,
}

struct LimiterGuard<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: u32) -> Self {
        Limiter {
            available: Mutex::new(permits.max(1)),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut available = self.available.lock().expect("limiter lock");
        while *available == 0 {
            available = self.signal.wait(available).expect("limiter wait");
        }
        *available -= 1;
        LimiterGuard(self)
    }
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().expect("limiter lock");
        *available += 1;
        self.0.signal.notify_one();
    }
}

/// Sampling settings for one completion call.
#[derive(Clone, Debug, Default)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
}

/// A completion with its finish metadata.
#[derive(Clone, Debug)]
pub struct Completion {
    pub text: String,
    pub finish_reason: Option<String>,
    /// The stop sequence enforced client-side, when one was found.
    pub stop_hit: Option<String>,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Shared blocking client for one endpoint.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: Limiter,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Never expose the key, even in debug output.
        f.debug_struct("HttpBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, HttpError> {
        let api_key = match &config.api_key_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| {
                HttpError::Config(format!("environment variable '{var}' is not set"))
            })?),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s.max(0.001)))
            .build()
            .map_err(|e| HttpError::Config(e.to_string()))?;
        let limiter = Limiter::new(config.max_parallel);
        Ok(HttpBackend {
            config,
            client,
            api_key,
            limiter,
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    /// One completion with retries, rate limiting, and client-side stop
    /// enforcement.
    pub fn complete(
        &self,
        prompt: &str,
        params: &CompletionParams,
    ) -> Result<Completion, HttpError> {
        let _permit = self.limiter.acquire();
        let url = self.endpoint();
        let mut attempts = 0u32;
        let mut last_error = String::new();
        while attempts <= self.config.max_retries {
            attempts += 1;
            if attempts > 1 {
                let exp = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempts - 2).min(16));
                let jitter = rand::rng().random_range(0..=self.config.backoff_ms.max(2) / 2);
                std::thread::sleep(Duration::from_millis(exp + jitter));
            }
            let body = CompletionRequest {
                model: &self.config.model,
                prompt,
                temperature: params.temperature,
                max_tokens: params.max_tokens,
                stop: &params.stop,
            };
            let mut request = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    last_error = format!("request failed: {e}");
                    continue;
                }
            };
            let status = response.status();
            if status.is_client_error() {
                return Err(HttpError::Config(format!(
                    "endpoint rejected the request with status {status}"
                )));
            }
            if !status.is_success() {
                last_error = format!("status {status}");
                continue;
            }
            let parsed: CompletionResponse = match response.json() {
                Ok(p) => p,
                Err(e) => return Err(HttpError::Protocol(e.to_string())),
            };
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| HttpError::Protocol("response has no choices".to_string()))?;
            return Ok(enforce_stops(choice, &params.stop));
        }
        Err(HttpError::Transport {
            attempts,
            message: last_error,
        })
    }
}

fn enforce_stops(choice: CompletionChoice, stops: &[String]) -> Completion {
    let mut cut: Option<(usize, &String)> = None;
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(at) = choice.text.find(stop.as_str()) {
            if cut.is_none_or(|(best, _)| at < best) {
                cut = Some((at, stop));
            }
        }
    }
    match cut {
        Some((at, stop)) => Completion {
            text: choice.text[..at].to_string(),
            finish_reason: choice.finish_reason,
            stop_hit: Some(stop.clone()),
        },
        None => Completion {
            text: choice.text,
            finish_reason: choice.finish_reason,
            stop_hit: None,
        },
    }
}

/// One-shot completion returning just the text.
pub fn http_complete(
    backend: &HttpBackend,
    prompt: &str,
    params: &CompletionParams,
) -> Result<String, HttpError> {
    backend.complete(prompt, params).map(|c| c.text)
}

impl TextCompleter for HttpBackend {
    fn complete_text(
        &self,
        prompt: &str,
        temperature: f64,
        max_tokens: u32,
        stop: &[String],
    ) -> Result<String, PolicyError> {
        let params = CompletionParams {
            temperature,
            max_tokens,
            stop: stop.to_vec(),
        };
        Ok(self.complete(prompt, &params)?.text)
    }
}

/// Option generator over an HTTP policy endpoint.
///
/// Streams are requested with the rule's stop sequences; for the formula
/// rule, segments that do not yet contain a formula keep the generation
/// going (up to `max_continuations` rounds) before the option is cut.
pub struct HttpGenerator {
    backend: Arc<HttpBackend>,
    max_continuations: u32,
    empty_retries: u32,
}

impl HttpGenerator {
    pub fn new(backend: Arc<HttpBackend>) -> Self {
        HttpGenerator {
            backend,
            max_continuations: 8,
            empty_retries: 2,
        }
    }
}

impl OptionGenerator for HttpGenerator {
    fn generate(
        &self,
        state: &SearchState,
        temperature: f64,
        rule: &TerminationRule,
        max_tokens: u32,
    ) -> Result<OptionStep, PolicyError> {
        let stop = rule.stop_sequences();
        let mut buffer = String::new();
        let mut empties = 0u32;
        for _ in 0..self.max_continuations.max(1) {
            let mut prompt = state.rendered().to_string();
            prompt.push_str(&buffer);
            let completion = self.backend.complete(
                &prompt,
                &CompletionParams {
                    temperature,
                    max_tokens,
                    stop: stop.clone(),
                },
            )?;
            let ended_at_stop = completion.stop_hit.is_some()
                || completion.finish_reason.as_deref() == Some("stop");
            if completion.text.is_empty() && !ended_at_stop {
                empties += 1;
                if empties > self.empty_retries {
                    return Err(PolicyError::GenerationExhausted);
                }
                continue;
            }
            buffer.push_str(&completion.text);
            if ended_at_stop && !buffer.contains(rule.marker()) {
                // The boundary itself was consumed as a stop sequence.
                buffer.push_str(rule.boundary_text());
            }
            if let Some(at) = scan_termination(&buffer, rule) {
                let text = buffer[..at].to_string();
                let is_terminal = text.contains(rule.marker());
                return Ok(OptionStep {
                    text,
                    boundary: rule.id().to_string(),
                    is_terminal,
                });
            }
            if buffer.contains(rule.marker())
                || completion.finish_reason.as_deref() != Some("stop")
            {
                // Either the answer marker arrived or the model ran out;
                // the remainder is a trajectory-final option.
                if buffer.is_empty() {
                    return Err(PolicyError::GenerationExhausted);
                }
                return Ok(OptionStep {
                    text: buffer,
                    boundary: rule.id().to_string(),
                    is_terminal: true,
                });
            }
        }
        if buffer.is_empty() {
            return Err(PolicyError::GenerationExhausted);
        }
        // Continuation rounds exhausted without a boundary: close the option.
        Ok(OptionStep {
            text: buffer,
            boundary: rule.id().to_string(),
            is_terminal: true,
        })
    }
}

/// Fast-rollout policy over a (smaller, cheaper) HTTP endpoint.
pub struct HttpFastRollout {
    backend: Arc<HttpBackend>,
    rule: Arc<TerminationRule>,
    max_tokens: u32,
}

impl HttpFastRollout {
    pub fn new(backend: Arc<HttpBackend>, rule: Arc<TerminationRule>) -> Self {
        HttpFastRollout {
            backend,
            rule,
            max_tokens: 1024,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

impl FastRolloutPolicy for HttpFastRollout {
    fn rollout(&self, state: &SearchState) -> Result<Trajectory, PolicyError> {
        let completion = self.backend.complete(
            state.rendered(),
            &CompletionParams {
                temperature: self.backend.config.temperature_fast,
                max_tokens: self.max_tokens,
                stop: Vec::new(),
            },
        )?;
        let mut continuation = completion.text;
        // Truncate past the answer line, keeping the terminal marker.
        let marker_rule = TerminationRule::terminal_marker("rollout-end", self.rule.marker());
        if let Some(at) = scan_termination(&continuation, &marker_rule) {
            continuation.truncate(at);
        }
        let (new_options, terminal) = continuation_to_options(&continuation, &self.rule);
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

/// Value critic that prompts the backend for a probability in [0, 1].
///
/// An unparseable response scores a neutral 0.5.
pub struct HttpValueCritic {
    backend: Arc<HttpBackend>,
    templates: Arc<TemplateRegistry>,
}

impl HttpValueCritic {
    pub fn new(backend: Arc<HttpBackend>, templates: Arc<TemplateRegistry>) -> Self {
        HttpValueCritic { backend, templates }
    }
}

fn first_float(text: &str) -> Option<f64> {
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let numeric = ch.is_ascii_digit() || ch == '.' || ch == '-' || ch == '+';
        match (start, numeric) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                if let Ok(v) = text[s..i].parse() {
                    return Some(v);
                }
                start = None;
            }
            _ => {}
        }
    }
    start.and_then(|s| text[s..].parse().ok())
}

impl ValueCritic for HttpValueCritic {
    fn value(&self, state: &SearchState) -> Result<f64, CriticError> {
        let prompt = self
            .templates
            .render(VALUE_TEMPLATE_ID, &[("state", state.rendered())])?;
        let response = self.backend.complete_text(
            &prompt,
            self.backend.config.temperature_critic,
            8,
            &["\n".to_string()],
        )?;
        Ok(first_float(&response).map_or(0.5, |v| v.clamp(0.0, 1.0)))
    }
}

/// Process reward model over the backend and the registered PRM template.
pub struct HttpProcessCritic {
    backend: Arc<HttpBackend>,
    templates: Arc<TemplateRegistry>,
}

impl HttpProcessCritic {
    pub fn new(backend: Arc<HttpBackend>, templates: Arc<TemplateRegistry>) -> Self {
        HttpProcessCritic { backend, templates }
    }
}

impl ProcessCritic for HttpProcessCritic {
    fn assess(&self, state: &SearchState, option: &OptionStep) -> Result<PrmVerdict, CriticError> {
        prm_assess(self.backend.as_ref(), &self.templates, state, option)
    }
}

/// Outcome reward model over the backend, with an optional tool verifier
/// and the documented judgement suffix enabled by default.
pub struct HttpOutcomeCritic {
    backend: Arc<HttpBackend>,
    templates: Arc<TemplateRegistry>,
    tool: Option<Arc<dyn ToolVerifier>>,
    append_judgement_suffix: bool,
}

impl HttpOutcomeCritic {
    pub fn new(backend: Arc<HttpBackend>, templates: Arc<TemplateRegistry>) -> Self {
        HttpOutcomeCritic {
            backend,
            templates,
            tool: None,
            append_judgement_suffix: true,
        }
    }

    pub fn with_tool(mut self, tool: Arc<dyn ToolVerifier>) -> Self {
        self.tool = Some(tool);
        self
    }

    pub fn with_judgement_suffix(mut self, enabled: bool) -> Self {
        self.append_judgement_suffix = enabled;
        self
    }
}

impl OutcomeCritic for HttpOutcomeCritic {
    fn assess(
        &self,
        prompt: &PromptText,
        trajectory: &Trajectory,
    ) -> Result<OrmVerdict, CriticError> {
        orm_assess(
            self.backend.as_ref(),
            &self.templates,
            prompt,
            trajectory,
            self.tool.as_deref(),
            self.append_judgement_suffix,
        )
    }
}

/// Model-based merge judge: asks the backend whether two steps are the same.
pub struct HttpMergeJudge {
    backend: Arc<HttpBackend>,
    templates: Arc<TemplateRegistry>,
}

impl HttpMergeJudge {
    pub fn new(backend: Arc<HttpBackend>, templates: Arc<TemplateRegistry>) -> Self {
        HttpMergeJudge { backend, templates }
    }
}

impl MergeJudge for HttpMergeJudge {
    fn same(&self, candidate: &str, representative: &str) -> Result<bool, MergeError> {
        let prompt = self
            .templates
            .render(MERGE_TEMPLATE_ID, &[("a", candidate), ("b", representative)])
            .map_err(|e| MergeError::Judge(e.to_string()))?;
        let response = self
            .backend
            .complete_text(
                &prompt,
                self.backend.config.temperature_critic,
                8,
                &["\n".to_string()],
            )
            .map_err(|e| MergeError::Judge(e.to_string()))?;
        Ok(response.to_lowercase().contains("same"))
    }
}
