//! Operator surface for the search engine: single searches, toy-domain
//! evaluation with feature ablations, and self-improvement rounds.
//!
//! Exit codes: 0 success, 1 configuration error, 2 backend error,
//! 3 internal invariant violation.

mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{Domain, RunConfig};
use etamcts::backends::derive_seed;
use etamcts::backends::http::{
    HttpBackend, HttpFastRollout, HttpGenerator, HttpOutcomeCritic, HttpProcessCritic,
    HttpValueCritic,
};
use etamcts::backends::templates::TemplateRegistry;
use etamcts::backends::toy::{ToyBackend, ToyInstance};
use etamcts::critics::{CriticBundle, CriticError, RewardOracle};
use etamcts::dump::write_tree_dump;
use etamcts::params::SearchParams;
use etamcts::policy::{FastRolloutPolicy, OptionGenerator};
use etamcts::search::{best_trajectory, SearchEngine, SearchError};
use etamcts::selfimprove::{
    advance_round, export_dataset, run_round, synthesize, EndpointSpec, IdentitySynthesizer,
    LlmRephraseSynthesizer, LoopConfig, PromptSynthesizer, RoundComponents, SelfImproveError,
    ToyPerturbSynthesizer,
};
use etamcts::termination::TerminationRegistry;
use etamcts::PromptText;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Backend(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Internal(m) => write!(f, "internal invariant violation: {m}"),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match &e {
            SearchError::Integrity(_) => CliError::Internal(e.to_string()),
            SearchError::Params(_) | SearchError::Termination(_) => {
                CliError::Config(e.to_string())
            }
            _ if e.is_backend_failure() => CliError::Backend(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CriticError> for CliError {
    fn from(e: CriticError) -> Self {
        if e.is_backend_failure() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<SelfImproveError> for CliError {
    fn from(e: SelfImproveError) -> Self {
        match e {
            SelfImproveError::Endpoint(m) => CliError::Backend(m),
            SelfImproveError::Search(inner) => inner.into(),
            SelfImproveError::Critic(inner) => inner.into(),
            SelfImproveError::Io { .. }
            | SelfImproveError::Parse { .. }
            | SelfImproveError::Template(_)
            | SelfImproveError::Synthesis(_) => CliError::Config(e.to_string()),
            SelfImproveError::Policy(ref inner) if inner.is_backend_failure() => {
                CliError::Backend(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "etamcts",
    about = "Option-level tree search over sequence-generation tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search one prompt and write the tree dump plus the best trajectory.
    Search(SearchArgs),
    /// Evaluate accuracy and rollout cost on seeded toy instances.
    EvalToy(EvalToyArgs),
    /// Run self-improvement rounds, exporting one dataset per round.
    SelfImprove(SelfImproveArgs),
}

#[derive(Args)]
struct SearchArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Named parameter profile overriding the config's choice.
    #[arg(long)]
    profile: Option<String>,
    /// Master seed overriding the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rollout budget override.
    #[arg(long)]
    budget: Option<u64>,
    /// Output directory for tree.json, best.json, and the config echo.
    #[arg(long)]
    out: Option<PathBuf>,
    /// The prompt to search (toy domain: an instance JSON).
    prompt: String,
}

#[derive(Args)]
struct EvalToyArgs {
    /// Run configuration (JSON); defaults to the built-in toy config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// Number of evaluation instances.
    #[arg(long, default_value_t = 20)]
    instances: u32,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra ablation rows: vanilla, no-adaptive, no-prm, no-orm, no-merge.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    /// Output directory for eval_report.json and the config echo.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfImproveArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Number of rounds to run.
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    /// Run directory (round-<k> subdirectories are created inside).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Everything off: fixed width, value term only, no merge.
    Vanilla,
    NoAdaptive,
    NoPrm,
    NoOrm,
    NoMerge,
}

impl Ablation {
    fn label(self) -> &'static str {
        match self {
            Ablation::Vanilla => "vanilla",
            Ablation::NoAdaptive => "no-adaptive",
            Ablation::NoPrm => "no-prm",
            Ablation::NoOrm => "no-orm",
            Ablation::NoMerge => "no-merge",
        }
    }

    fn apply(self, params: &mut SearchParams) {
        match self {
            Ablation::Vanilla => {
                params.adaptive_branching = false;
                params.weights.prm = 0.0;
                params.weights.orm = 0.0;
                params.merge_enabled = false;
            }
            Ablation::NoAdaptive => params.adaptive_branching = false,
            Ablation::NoPrm => params.weights.prm = 0.0,
            Ablation::NoOrm => params.weights.orm = 0.0,
            Ablation::NoMerge => params.merge_enabled = false,
        }
    }
}

/// Wired policy, rollout, and critic implementations for one run.
struct Components {
    generator: Box<dyn OptionGenerator>,
    fast: Box<dyn FastRolloutPolicy>,
    critics: CriticBundle,
    toy: Option<ToyBackend>,
}

fn build_termination(config: &RunConfig) -> Result<TerminationRegistry, CliError> {
    let mut registry = TerminationRegistry::with_builtins();
    for spec in &config.termination {
        registry
            .register(spec)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(registry)
}

fn build_templates(config: &RunConfig) -> Result<Arc<TemplateRegistry>, CliError> {
    let mut templates = TemplateRegistry::with_builtins();
    if let Some(path) = &config.templates_file {
        templates
            .load_file(path)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(Arc::new(templates))
}

fn build_components(
    config: &RunConfig,
    params: &SearchParams,
    registry: &TerminationRegistry,
    seed: u64,
    policy: Option<&EndpointSpec>,
) -> Result<Components, CliError> {
    match config.domain {
        Domain::Toy => {
            let backend = ToyBackend::new(seed).with_value_noise(config.toy.value_noise);
            let generator: Box<dyn OptionGenerator> = match policy {
                None => Box::new(backend.generator()),
                Some(EndpointSpec::ToyUniform { seed }) => {
                    Box::new(ToyBackend::new(*seed).generator())
                }
                Some(EndpointSpec::ToyGreedy { .. }) => Box::new(backend.greedy_generator()),
                Some(EndpointSpec::Http(_)) => {
                    return Err(CliError::Config(
                        "toy domain cannot use an http policy endpoint".to_string(),
                    ));
                }
            };
            let critics = backend
                .critic_bundle(params.weights)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Components {
                generator,
                fast: Box::new(backend.fast_rollout_policy()),
                critics,
                toy: Some(backend),
            })
        }
        Domain::Llm => {
            let backends = config
                .backends
                .as_ref()
                .expect("validated: llm domain has backends");
            let templates = build_templates(config)?;
            let policy_config = match policy {
                Some(EndpointSpec::Http(c)) => c.clone(),
                Some(_) => {
                    return Err(CliError::Config(
                        "llm domain cannot use a toy policy endpoint".to_string(),
                    ));
                }
                None => backends.policy.clone(),
            };
            let policy_backend = Arc::new(
                HttpBackend::new(policy_config).map_err(|e| CliError::Config(e.to_string()))?,
            );
            let fast_backend = Arc::new(
                HttpBackend::new(backends.fast_rollout.clone())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            );
            let critic_backend = match &backends.critic {
                Some(c) => Arc::new(
                    HttpBackend::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?,
                ),
                None => policy_backend.clone(),
            };
            let rule = registry
                .get(&params.termination_rule)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let critics = CriticBundle::new(
                Arc::new(HttpValueCritic::new(
                    critic_backend.clone(),
                    templates.clone(),
                )),
                Arc::new(HttpProcessCritic::new(
                    critic_backend.clone(),
                    templates.clone(),
                )),
                Arc::new(HttpOutcomeCritic::new(critic_backend, templates.clone())),
                params.weights,
            )
            .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Components {
                generator: Box::new(HttpGenerator::new(policy_backend)),
                fast: Box::new(HttpFastRollout::new(fast_backend, rule)),
                critics,
                toy: None,
            })
        }
    }
}

fn echo_config(config: &RunConfig, params: &SearchParams, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let effective = serde_json::json!({
        "run": config,
        "resolved_params": params,
    });
    let text =
        serde_json::to_string_pretty(&effective).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(dir.join("config.json"), text)
        .map_err(|e| CliError::Config(format!("cannot write config echo: {e}")))?;
    Ok(())
}

fn cmd_search(args: SearchArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let params = config.resolved_params(args.profile.as_deref(), args.budget)?;
    let registry = build_termination(&config)?;
    let prompt = PromptText::new(args.prompt.clone())
        .map_err(|e| CliError::Config(format!("invalid prompt: {e}")))?;
    if config.domain == Domain::Toy {
        ToyInstance::parse_prompt(&prompt)
            .map_err(|e| CliError::Config(format!("toy prompt must be an instance JSON: {e}")))?;
    }
    let components = build_components(&config, &params, &registry, seed, None)?;
    let engine = SearchEngine::new(
        components.generator.as_ref(),
        components.fast.as_ref(),
        &components.critics,
        &params,
        &registry,
    )?;
    let tree = engine.run(&prompt)?;

    let out_dir = args.out.clone().or_else(|| config.out_dir.clone());
    if let Some(dir) = &out_dir {
        echo_config(&config, &params, dir)?;
        write_tree_dump(&tree, &dir.join("tree.json"))
            .map_err(|e| CliError::Config(format!("cannot write tree dump: {e}")))?;
    }
    if let Some(error) = &tree.error {
        return Err(CliError::Backend(format!(
            "search aborted mid-way: {error} ({} nodes built)",
            tree.len()
        )));
    }
    let best = best_trajectory(&tree)?;
    println!("rollouts: {}", tree.rollout_count);
    println!(
        "score: {}",
        best.critic_score
            .map_or("none".to_string(), |s| format!("{s:.6}"))
    );
    println!("terminal: {}", best.terminal);
    println!("--- best trajectory ---");
    println!("{}", best.rendered_options());
    if let Some(dir) = &out_dir {
        let record = serde_json::json!({
            "prompt": prompt.as_str(),
            "trajectory": best.rendered_options(),
            "critic_score": best.critic_score,
            "terminal": best.terminal,
            "rollouts": tree.rollout_count,
        });
        std::fs::write(
            dir.join("best.json"),
            serde_json::to_string_pretty(&record)
                .map_err(|e| CliError::Internal(e.to_string()))?,
        )
        .map_err(|e| CliError::Config(format!("cannot write best.json: {e}")))?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalRow {
    config: String,
    solved: usize,
    accuracy: f64,
    mean_rollouts: f64,
}

/// Runs the paired evaluation of one parameter variant over the instances.
fn eval_variant(
    label: &str,
    config: &RunConfig,
    params: &SearchParams,
    registry: &TerminationRegistry,
    instances: &[ToyInstance],
    seed: u64,
) -> Result<EvalRow, CliError> {
    let mut solved = 0usize;
    let mut rollouts_total = 0u64;
    for (index, instance) in instances.iter().enumerate() {
        let run_seed = derive_seed(seed, "eval-run", index as u64);
        let components = build_components(config, params, registry, run_seed, None)?;
        let engine = SearchEngine::new(
            components.generator.as_ref(),
            components.fast.as_ref(),
            &components.critics,
            params,
            registry,
        )?;
        let prompt = instance.prompt();
        let tree = engine.run(&prompt)?;
        if let Some(error) = &tree.error {
            return Err(CliError::Backend(error.clone()));
        }
        rollouts_total += tree.rollout_count;
        let best = best_trajectory(&tree)?;
        let toy = components.toy.as_ref().expect("toy domain");
        let reward = toy.reward_oracle().final_reward(&best)?;
        if reward >= 1.0 {
            solved += 1;
        }
    }
    Ok(EvalRow {
        config: label.to_string(),
        solved,
        accuracy: solved as f64 / instances.len() as f64,
        mean_rollouts: rollouts_total as f64 / instances.len() as f64,
    })
}

fn cmd_eval_toy(args: EvalToyArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default_toy(),
    };
    if config.domain != Domain::Toy {
        return Err(CliError::Config(
            "eval-toy requires a toy-domain configuration".to_string(),
        ));
    }
    if args.instances == 0 {
        return Err(CliError::Config(
            "usage error: --instances must be at least 1".to_string(),
        ));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let base = config.resolved_params(args.profile.as_deref(), args.budget)?;
    let registry = build_termination(&config)?;
    let instances = config.toy.sampler.sample_batch(
        derive_seed(seed, "eval-instances", 0),
        args.instances as usize,
    );

    // Canonical row order regardless of how the flags were passed.
    let mut ablations: Vec<Ablation> = Vec::new();
    for a in [
        Ablation::Vanilla,
        Ablation::NoAdaptive,
        Ablation::NoPrm,
        Ablation::NoOrm,
        Ablation::NoMerge,
    ] {
        if args.ablate.contains(&a) && !ablations.contains(&a) {
            ablations.push(a);
        }
    }

    let mut rows = vec![eval_variant(
        "full", &config, &base, &registry, &instances, seed,
    )?];
    for ablation in ablations {
        let mut params = base.clone();
        ablation.apply(&mut params);
        rows.push(eval_variant(
            ablation.label(),
            &config,
            &params,
            &registry,
            &instances,
            seed,
        )?);
    }

    println!(
        "toy evaluation: instances={} budget={} seed={seed}",
        instances.len(),
        base.rollout_budget
    );
    println!("{:<14}{:>10}{:>16}", "config", "accuracy", "mean_rollouts");
    for row in &rows {
        println!(
            "{:<14}{:>10.4}{:>16.2}",
            row.config, row.accuracy, row.mean_rollouts
        );
    }
    if let Some(dir) = args.out.clone().or_else(|| config.out_dir.clone()) {
        echo_config(&config, &base, &dir)?;
        let report = serde_json::json!({
            "instances": instances.len(),
            "budget": base.rollout_budget,
            "seed": seed,
            "rows": rows,
        });
        std::fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Internal(e.to_string()))?,
        )
        .map_err(|e| CliError::Config(format!("cannot write eval report: {e}")))?;
    }
    Ok(())
}

fn seed_prompts(config: &RunConfig, seed: u64) -> Result<Vec<PromptText>, CliError> {
    if !config.self_improve.seed_prompts.is_empty() {
        let mut prompts = Vec::new();
        for (i, text) in config.self_improve.seed_prompts.iter().enumerate() {
            let prompt = PromptText::new(text.clone())
                .map_err(|e| CliError::Config(format!("seed prompt {i}: {e}")))?;
            if config.domain == Domain::Toy {
                ToyInstance::parse_prompt(&prompt).map_err(|e| {
                    CliError::Config(format!("seed prompt {i} is not a toy instance: {e}"))
                })?;
            }
            prompts.push(prompt);
        }
        return Ok(prompts);
    }
    match config.domain {
        Domain::Toy => Ok(config
            .toy
            .sampler
            .sample_batch(
                derive_seed(seed, "seed-prompts", 0),
                config.self_improve.seed_instances.max(1),
            )
            .into_iter()
            .map(|i| i.prompt())
            .collect()),
        Domain::Llm => Err(CliError::Config(
            "llm domain requires self_improve.seed_prompts".to_string(),
        )),
    }
}

fn build_synthesizer(
    config: &RunConfig,
    seed: u64,
) -> Result<Box<dyn PromptSynthesizer>, CliError> {
    let name = config
        .synthesizer
        .as_deref()
        .unwrap_or(match config.domain {
            Domain::Toy => "toy-perturb",
            Domain::Llm => "identity",
        });
    match name {
        "identity" => Ok(Box::new(IdentitySynthesizer)),
        "toy-perturb" => {
            if config.domain != Domain::Toy {
                return Err(CliError::Config(
                    "toy-perturb synthesizer requires the toy domain".to_string(),
                ));
            }
            Ok(Box::new(ToyPerturbSynthesizer {
                seed: derive_seed(seed, "synthesizer", 0),
            }))
        }
        "llm-rephrase" => {
            let backends = config.backends.as_ref().ok_or_else(|| {
                CliError::Config("llm-rephrase synthesizer requires backends".to_string())
            })?;
            let backend = Arc::new(
                HttpBackend::new(backends.policy.clone())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            );
            Ok(Box::new(LlmRephraseSynthesizer::new(
                backend,
                build_templates(config)?,
            )))
        }
        other => Err(CliError::Config(format!("unknown synthesizer '{other}'"))),
    }
}

fn cmd_self_improve(args: SelfImproveArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    if args.rounds == 0 {
        return Err(CliError::Config(
            "usage error: --rounds must be at least 1".to_string(),
        ));
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| {
            CliError::Config(
                "self-improve needs an output directory (--out or out_dir)".to_string(),
            )
        })?;
    let seed = args.seed.unwrap_or(config.seed);
    let params = config.resolved_params(args.profile.as_deref(), args.budget)?;
    let registry = build_termination(&config)?;
    let templates = build_templates(&config)?;
    let seeds = seed_prompts(&config, seed)?;
    let synthesizer = build_synthesizer(&config, seed)?;
    let gamma = config
        .self_improve
        .gamma
        .unwrap_or(params.filter_threshold);
    echo_config(&config, &params, &out)?;

    let mut loop_config = LoopConfig {
        round: 1,
        policy: match config.domain {
            Domain::Toy => EndpointSpec::ToyUniform {
                seed: derive_seed(seed, "policy", 0),
            },
            Domain::Llm => EndpointSpec::Http(
                config
                    .backends
                    .as_ref()
                    .expect("validated: llm domain has backends")
                    .policy
                    .clone(),
            ),
        },
    };

    for _ in 0..args.rounds {
        let round = loop_config.round;
        let round_dir = out.join(format!("round-{round}"));
        std::fs::create_dir_all(&round_dir)
            .map_err(|e| CliError::Config(format!("cannot create round dir: {e}")))?;
        let round_seed = derive_seed(seed, "round", round as u64);
        let components = build_components(
            &config,
            &params,
            &registry,
            round_seed,
            Some(&loop_config.policy),
        )?;
        let batch = synthesize(
            synthesizer.as_ref(),
            &seeds,
            config.self_improve.prompts_per_round.max(1),
            round,
        )?;
        let round_components = RoundComponents {
            generator: components.generator.as_ref(),
            fast_rollout: components.fast.as_ref(),
            critics: &components.critics,
            params: &params,
            termination: &registry,
        };
        let (dataset, mut report) = run_round(
            &batch.prompts,
            &round_components,
            round,
            gamma,
            Some(&round_dir.join("trees")),
        )?;
        report
            .failures
            .extend(batch.warnings.iter().map(|w| format!("synthesis: {w}")));
        if dataset.examples.is_empty() {
            eprintln!("round {round}: no example cleared gamma, dataset not written");
        } else {
            export_dataset(&dataset, &templates, &round_dir.join("dataset.jsonl"))?;
        }
        std::fs::write(
            round_dir.join("report.json"),
            serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Internal(e.to_string()))?,
        )
        .map_err(|e| CliError::Config(format!("cannot write report: {e}")))?;
        println!(
            "round {round}: prompts={} kept={} dropped={} mean_rollouts={:.2}",
            report.prompts_attempted, report.kept, report.dropped, report.mean_rollouts
        );

        // Swap in the next policy (or keep the current one) for round k+1.
        let next_policy = config
            .self_improve
            .advance
            .clone()
            .unwrap_or_else(|| loop_config.policy.clone());
        loop_config = advance_round(&loop_config, next_policy)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search(args) => cmd_search(args),
        Command::EvalToy(args) => cmd_eval_toy(args),
        Command::SelfImprove(args) => cmd_self_improve(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("{error}");
        std::process::exit(error.exit_code());
    }
}
