//! The self-improvement loop: synthesize prompts, search each one, keep the
//! best trajectory when its outcome score clears the threshold, export the
//! kept pairs as a training dataset, and hand the next round a refreshed
//! policy endpoint.
//!
//! The loop itself never trains a model; finetuning happens outside and
//! re-enters through [`advance_round`] as a new endpoint.

use crate::backends::derive_seed;
use crate::backends::http::{HttpBackend, HttpBackendConfig};
use crate::backends::templates::{TemplateRegistry, POLICY_TEMPLATE_ID, REPHRASE_TEMPLATE_ID};
use crate::backends::toy::{perturb_instance, ToyInstance};
use crate::critics::{CriticBundle, CriticError};
use crate::dump::write_tree_dump;
use crate::params::SearchParams;
use crate::policy::{FastRolloutPolicy, OptionGenerator, PolicyError, TextCompleter};
use crate::search::{best_trajectory, SearchEngine, SearchError};
use crate::termination::TerminationRegistry;
use crate::types::{CoreError, PromptText};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelfImproveError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Template(#[from] crate::backends::templates::TemplateError),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("endpoint health check failed: {0}")]
    Endpoint(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset line {line} is not valid JSON: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SelfImproveError + '_ {
    move |source| SelfImproveError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A synthesized prompt with the index of the seed it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedPrompt {
    pub prompt: PromptText,
    pub seed_index: usize,
}

/// A batch of synthesized prompts plus any fallback warnings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBatch {
    pub prompts: Vec<SynthesizedPrompt>,
    pub warnings: Vec<String>,
}

/// The transformation that turns seed prompts into new learning examples.
pub trait PromptSynthesizer: Send + Sync {
    fn synthesize(
        &self,
        seeds: &[PromptText],
        count: usize,
        round: usize,
    ) -> Result<PromptBatch, SelfImproveError>;
}

/// Cycles the seed prompts unchanged.
pub struct IdentitySynthesizer;

impl PromptSynthesizer for IdentitySynthesizer {
    fn synthesize(
        &self,
        seeds: &[PromptText],
        count: usize,
        _round: usize,
    ) -> Result<PromptBatch, SelfImproveError> {
        let prompts = (0..count)
            .map(|i| SynthesizedPrompt {
                prompt: seeds[i % seeds.len()].clone(),
                seed_index: i % seeds.len(),
            })
            .collect();
        Ok(PromptBatch {
            prompts,
            warnings: Vec::new(),
        })
    }
}

/// Perturbs toy instances into fresh, solvability-checked variants.
pub struct ToyPerturbSynthesizer {
    pub seed: u64,
}

impl PromptSynthesizer for ToyPerturbSynthesizer {
    fn synthesize(
        &self,
        seeds: &[PromptText],
        count: usize,
        round: usize,
    ) -> Result<PromptBatch, SelfImproveError> {
        let mut prompts = Vec::with_capacity(count);
        for i in 0..count {
            let seed_index = i % seeds.len();
            let instance = ToyInstance::parse_prompt(&seeds[seed_index])
                .map_err(|e| SelfImproveError::Synthesis(e.to_string()))?;
            let item_seed = derive_seed(derive_seed(self.seed, "round", round as u64), "item", i as u64);
            let perturbed = perturb_instance(&instance, item_seed);
            prompts.push(SynthesizedPrompt {
                prompt: perturbed.prompt(),
                seed_index,
            });
        }
        Ok(PromptBatch {
            prompts,
            warnings: Vec::new(),
        })
    }
}

/// Rewrites seed questions through a completion backend, falling back to the
/// unchanged seed (with a warning) when the backend call fails.
pub struct LlmRephraseSynthesizer {
    completer: std::sync::Arc<dyn TextCompleter>,
    templates: std::sync::Arc<TemplateRegistry>,
}

impl LlmRephraseSynthesizer {
    pub fn new(
        completer: std::sync::Arc<dyn TextCompleter>,
        templates: std::sync::Arc<TemplateRegistry>,
    ) -> Self {
        LlmRephraseSynthesizer {
            completer,
            templates,
        }
    }
}

impl PromptSynthesizer for LlmRephraseSynthesizer {
    fn synthesize(
        &self,
        seeds: &[PromptText],
        count: usize,
        _round: usize,
    ) -> Result<PromptBatch, SelfImproveError> {
        let mut batch = PromptBatch::default();
        for i in 0..count {
            let seed_index = i % seeds.len();
            let seed = &seeds[seed_index];
            let rendered = self
                .templates
                .render(REPHRASE_TEMPLATE_ID, &[("question", seed.as_str())])?;
            let prompt = match self
                .completer
                .complete_text(&rendered, 0.8, 512, &[])
                .ok()
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .and_then(|t| PromptText::new(t).ok())
            {
                Some(p) => p,
                None => {
                    batch
                        .warnings
                        .push(format!("rephrase of seed {seed_index} failed; kept the original"));
                    seed.clone()
                }
            };
            batch.prompts.push(SynthesizedPrompt { prompt, seed_index });
        }
        Ok(batch)
    }
}

/// Validates inputs, delegates to the synthesizer, and enforces the count.
pub fn synthesize(
    synth: &dyn PromptSynthesizer,
    seeds: &[PromptText],
    count: usize,
    round: usize,
) -> Result<PromptBatch, SelfImproveError> {
    if count == 0 {
        return Err(SelfImproveError::Contract("count must be >= 1".to_string()));
    }
    if seeds.is_empty() {
        return Err(SelfImproveError::Contract("seeds must be non-empty".to_string()));
    }
    let batch = synth.synthesize(seeds, count, round)?;
    if batch.prompts.len() != count {
        return Err(SelfImproveError::Contract(format!(
            "synthesizer returned {} prompts, wanted {count}",
            batch.prompts.len()
        )));
    }
    Ok(batch)
}

/// One kept training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub trajectory_text: String,
    pub critic_score: f64,
    pub orm_score: f64,
}

/// The filtered dataset of one round: only examples whose outcome score
/// strictly exceeds the threshold are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDataset {
    pub round: usize,
    pub examples: Vec<TrainingExample>,
    pub kept: usize,
    pub dropped: usize,
}

/// Aggregate statistics of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub prompts_attempted: usize,
    pub trees_built: usize,
    pub mean_rollouts: f64,
    pub kept: usize,
    pub dropped: usize,
    pub wall_time_s: f64,
    pub failures: Vec<String>,
}

/// Everything a round needs to search one prompt.
pub struct RoundComponents<'a> {
    pub generator: &'a dyn OptionGenerator,
    pub fast_rollout: &'a dyn FastRolloutPolicy,
    pub critics: &'a CriticBundle,
    pub params: &'a SearchParams,
    pub termination: &'a TerminationRegistry,
}

/// Searches every prompt, filters best trajectories by outcome score
/// (keep iff `orm_score > gamma`), and reports aggregates. Per-prompt
/// failures are recorded and the round continues. When `trees_dir` is
/// given, each finished tree is dumped to `<trees_dir>/<prompt-idx>.json`.
pub fn run_round(
    prompts: &[SynthesizedPrompt],
    components: &RoundComponents<'_>,
    round: usize,
    gamma: f64,
    trees_dir: Option<&Path>,
) -> Result<(RoundDataset, RoundReport), SelfImproveError> {
    let started = Instant::now();
    let engine = SearchEngine::new(
        components.generator,
        components.fast_rollout,
        components.critics,
        components.params,
        components.termination,
    )?;
    if let Some(dir) = trees_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    let mut trees_built = 0usize;
    let mut rollouts_total = 0u64;
    let mut kept = 0usize;
    let mut dropped = 0usize;
    for (index, synthesized) in prompts.iter().enumerate() {
        let prompt = &synthesized.prompt;
        let tree = match engine.run(prompt) {
            Ok(tree) => tree,
            Err(e) => {
                failures.push(format!("prompt {index}: search failed: {e}"));
                continue;
            }
        };
        if let Some(error) = &tree.error {
            failures.push(format!("prompt {index}: backend failure mid-search: {error}"));
        }
        if let Some(dir) = trees_dir {
            let path = dir.join(format!("{index}.json"));
            write_tree_dump(&tree, &path).map_err(io_err(&path))?;
        }
        trees_built += 1;
        rollouts_total += tree.rollout_count;
        let trajectory = match best_trajectory(&tree) {
            Ok(t) => t,
            Err(e) => {
                failures.push(format!("prompt {index}: no usable trajectory: {e}"));
                continue;
            }
        };
        let orm_score = match components.critics.orm.assess(prompt, &trajectory) {
            Ok(verdict) => verdict.scalar,
            Err(e) => {
                failures.push(format!("prompt {index}: outcome assessment failed: {e}"));
                continue;
            }
        };
        if orm_score > gamma {
            kept += 1;
            examples.push(TrainingExample {
                prompt: prompt.as_str().to_string(),
                trajectory_text: trajectory.rendered_options(),
                critic_score: trajectory.critic_score.unwrap_or(0.0),
                orm_score,
            });
        } else {
            dropped += 1;
        }
    }
    let dataset = RoundDataset {
        round,
        examples,
        kept,
        dropped,
    };
    let report = RoundReport {
        round,
        prompts_attempted: prompts.len(),
        trees_built,
        mean_rollouts: if trees_built == 0 {
            0.0
        } else {
            rollouts_total as f64 / trees_built as f64
        },
        kept,
        dropped,
        wall_time_s: started.elapsed().as_secs_f64(),
        failures,
    };
    Ok((dataset, report))
}

/// One exported JSONL record.
#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    prompt: String,
    raw_question: String,
    raw_answer: String,
    critic_score: f64,
    orm_score: f64,
    round: usize,
}

/// Writes the dataset as JSONL, one record per kept example in prompt
/// order. The `prompt` field carries the chat-rendered pair (question plus
/// assistant response); the raw fields keep the original strings so the
/// file re-imports losslessly.
pub fn export_dataset(
    dataset: &RoundDataset,
    templates: &TemplateRegistry,
    path: &Path,
) -> Result<(), SelfImproveError> {
    if dataset.examples.is_empty() {
        return Err(SelfImproveError::Contract(
            "refusing to export an empty dataset".to_string(),
        ));
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    for example in &dataset.examples {
        let rendered = templates.render(
            POLICY_TEMPLATE_ID,
            &[
                ("question", example.prompt.as_str()),
                ("answer", example.trajectory_text.as_str()),
            ],
        )?;
        let record = DatasetRecord {
            prompt: rendered,
            raw_question: example.prompt.clone(),
            raw_answer: example.trajectory_text.clone(),
            critic_score: example.critic_score,
            orm_score: example.orm_score,
            round: dataset.round,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| SelfImproveError::Contract(e.to_string()))?;
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Reads a dataset back from JSONL. Kept/dropped counts beyond the stored
/// examples are not part of the file; `dropped` comes back as zero.
pub fn import_dataset(path: &Path) -> Result<RoundDataset, SelfImproveError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    let mut round = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| SelfImproveError::Parse {
                line: i + 1,
                source,
            })?;
        round = record.round;
        examples.push(TrainingExample {
            prompt: record.raw_question,
            trajectory_text: record.raw_answer,
            critic_score: record.critic_score,
            orm_score: record.orm_score,
        });
    }
    let kept = examples.len();
    Ok(RoundDataset {
        round,
        examples,
        kept,
        dropped: 0,
    })
}

/// Where the next round's policy comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointSpec {
    /// The uniform toy policy (the identity "finetune" stub).
    ToyUniform { seed: u64 },
    /// The oracle-greedy toy policy, standing in for an improved model.
    ToyGreedy { seed: u64 },
    /// A fresh OpenAI-compatible endpoint.
    Http(HttpBackendConfig),
}

impl EndpointSpec {
    /// Cheap reachability probe; toy endpoints are always healthy.
    pub fn health_check(&self) -> Result<(), SelfImproveError> {
        match self {
            EndpointSpec::ToyUniform { .. } | EndpointSpec::ToyGreedy { .. } => Ok(()),
            EndpointSpec::Http(config) => {
                let backend = HttpBackend::new(config.clone())
                    .map_err(|e| SelfImproveError::Endpoint(e.to_string()))?;
                let client = reqwest::blocking::Client::builder()
                    .timeout(std::time::Duration::from_secs_f64(config.timeout_s.max(0.001)))
                    .build()
                    .map_err(|e| SelfImproveError::Endpoint(e.to_string()))?;
                let url = format!("{}/v1/models", config.base_url.trim_end_matches('/'));
                let response = client
                    .get(&url)
                    .send()
                    .map_err(|e| SelfImproveError::Endpoint(e.to_string()))?;
                if response.status().is_success() || response.status().as_u16() == 404 {
                    // A 404 on /v1/models still proves the host is up.
                    drop(backend);
                    Ok(())
                } else {
                    Err(SelfImproveError::Endpoint(format!(
                        "endpoint answered {}",
                        response.status()
                    )))
                }
            }
        }
    }
}

/// Loop position: the active round counter and policy endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub round: usize,
    pub policy: EndpointSpec,
}

/// Swaps in the next round's policy after its health check passes. On
/// failure the error is returned and the original config stays in force;
/// earlier rounds' artifacts are never touched.
pub fn advance_round(
    config: &LoopConfig,
    new_policy: EndpointSpec,
) -> Result<LoopConfig, SelfImproveError> {
    new_policy.health_check()?;
    Ok(LoopConfig {
        round: config.round + 1,
        policy: new_policy,
    })
}
