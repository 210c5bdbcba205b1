//! Run configuration: one TOML file plus `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use widescale::augment::AugmentConfig;
use widescale::ensemble::{ExecutionOptions, MixtureEntry};
use widescale::judge::{JudgeConfig, Strategy};
use widescale::metrics::DEFAULT_RESAMPLES;
use widescale::narrative::RepresentationKind;
use widescale::sim::scripted::ScriptedProfile;
use widescale::vlm::SamplingParams;

use crate::error::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Backend spec, same syntax as `--backend`.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub tasks: TaskFilter,
    #[serde(default = "default_agents")]
    pub agents: Vec<AgentConfig>,
    /// Candidates per task for `rollout`; defaults to the largest N swept.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_sweep")]
    pub n_sweep: Vec<usize>,
    #[serde(default = "default_representation")]
    pub representation: RepresentationKind,
    #[serde(default)]
    pub judge: JudgeSection,
    #[serde(default)]
    pub narrative: NarrativeSection,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default = "AugmentConfig::desk_scale")]
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Task pack; the bundled pack when unset.
    pub tasks: Option<PathBuf>,
    pub rollouts: PathBuf,
    /// Directory of prompt files overriding the builtin ones by name.
    pub prompts: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            tasks: None,
            rollouts: PathBuf::from("rollouts"),
            prompts: None,
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFilter {
    /// Exact task ids; empty means every task.
    pub ids: Vec<String>,
    /// Family tags (`form_fill`, `multi_path`, `bulk_edit`).
    pub families: Vec<String>,
    /// Keep only the first `limit` tasks after filtering.
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Scripted,
    Vlm,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: String,
    pub kind: AgentKind,
    /// Scripted agents only.
    #[serde(default)]
    pub success_prob: Option<f64>,
    #[serde(default = "default_detour_rate")]
    pub detour_rate: f64,
    #[serde(default = "default_max_detours")]
    pub max_detours: u32,
    /// VLM agents only.
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub temperature: Option<f32>,
    #[serde(default)]
    pub reflection: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    /// The sweep runs every strategy; `select` uses the first.
    pub strategies: Vec<Strategy>,
    pub citing: bool,
    pub model: String,
    pub temperature: f32,
    pub retries: u32,
    /// File replacing the builtin guideline block.
    pub guidelines: Option<PathBuf>,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            strategies: vec![Strategy::Mcq],
            citing: true,
            model: String::new(),
            temperature: 0.0,
            retries: 2,
            guidelines: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Facts read off the simulator state.
    Rule,
    Vlm,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NarrativeSection {
    pub generator: GeneratorKind,
    pub model: String,
    pub retries: u32,
    /// Rule generator only: chance of a false change line per transition.
    pub hallucination_rate: f64,
}

impl Default for NarrativeSection {
    fn default() -> Self {
        NarrativeSection {
            generator: GeneratorKind::Rule,
            model: String::new(),
            retries: widescale::narrative::DEFAULT_FACT_RETRIES,
            hallucination_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub step_budget: Option<u32>,
    pub timeout_secs: Option<u64>,
    /// Concurrent rollouts per task; 0 picks from the core count.
    pub workers: usize,
    /// Concurrent model requests.
    pub max_in_flight: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            step_budget: None,
            timeout_secs: None,
            workers: 0,
            max_in_flight: 4,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub resamples: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

fn default_backend() -> String {
    "mock".to_string()
}

fn default_agents() -> Vec<AgentConfig> {
    ["scripted-a", "scripted-b"]
        .into_iter()
        .map(|id| AgentConfig {
            id: id.to_string(),
            kind: AgentKind::Scripted,
            success_prob: Some(0.5),
            detour_rate: default_detour_rate(),
            max_detours: default_max_detours(),
            model: String::new(),
            temperature: None,
            reflection: false,
        })
        .collect()
}

fn default_detour_rate() -> f64 {
    0.25
}

fn default_max_detours() -> u32 {
    4
}

fn default_sweep() -> Vec<usize> {
    vec![1, 2, 3, 4, 5]
}

fn default_representation() -> RepresentationKind {
    RepresentationKind::BehaviorNarrative
}

impl Default for RunConfig {
    fn default() -> Self {
        from_table(toml::Table::new()).expect("empty config is valid")
    }
}

/// Parses `text`, applies `overrides` (`a.b=value`, value in TOML syntax or
/// a bare string) and validates the result.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config = from_table(table)?;
    let problems = config.violations();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Config(problems.join("; ")))
    }
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse(&text, overrides).map_err(|e| match (e, path) {
        (CliError::Config(m), Some(p)) => CliError::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })
}

fn from_table(table: toml::Table) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!("at `{path}`: {}", inner.message()))
    })
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("override {spec:?} has no key")))?;
    let mut at = table;
    for p in parts {
        let entry = at
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {spec:?}: `{p}` is not a table")))?;
    }
    at.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.agents.is_empty() {
            out.push("agents: at least one agent is required".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            if a.id.is_empty() {
                out.push(format!("agents[{i}].id is empty"));
            }
            if !seen.insert(a.id.as_str()) {
                out.push(format!("agents[{i}].id {:?} is repeated", a.id));
            }
            match a.kind {
                AgentKind::Scripted => match a.success_prob {
                    Some(p) if (0.0..=1.0).contains(&p) => {}
                    Some(p) => out.push(format!("agents[{i}].success_prob {p} is outside [0, 1]")),
                    None => out.push(format!("agents[{i}].success_prob is required for scripted agents")),
                },
                AgentKind::Vlm => {
                    if a.success_prob.is_some() {
                        out.push(format!("agents[{i}].success_prob only applies to scripted agents"));
                    }
                }
            }
            if !(0.0..=1.0).contains(&a.detour_rate) {
                out.push(format!("agents[{i}].detour_rate {} is outside [0, 1]", a.detour_rate));
            }
        }
        if self.n_sweep.is_empty() || self.n_sweep.contains(&0) {
            out.push("n_sweep must list positive sizes".to_string());
        }
        if self.n == Some(0) {
            out.push("n must be positive".to_string());
        }
        if self.judge.strategies.is_empty() {
            out.push("judge.strategies is empty".to_string());
        }
        if !(0.0..=1.0).contains(&self.narrative.hallucination_rate) {
            out.push("narrative.hallucination_rate is outside [0, 1]".to_string());
        }
        if self.bootstrap.resamples == 0 {
            out.push("bootstrap.resamples must be positive".to_string());
        }
        if self.budgets.max_in_flight == 0 {
            out.push("budgets.max_in_flight must be positive".to_string());
        }
        out
    }

    pub fn candidate_count(&self) -> usize {
        self.n.unwrap_or_else(|| self.n_sweep.iter().copied().max().unwrap_or(1))
    }

    pub fn mixture(&self) -> Vec<MixtureEntry> {
        self.agents
            .iter()
            .map(|a| MixtureEntry {
                policy_id: a.id.clone(),
                model_id: a.model.clone(),
                count: 1,
                base_seed: self.seed,
                temperature: a.temperature,
            })
            .collect()
    }

    pub fn scripted_profiles(&self) -> Vec<ScriptedProfile> {
        self.agents
            .iter()
            .filter(|a| a.kind == AgentKind::Scripted)
            .map(|a| ScriptedProfile {
                policy_id: a.id.clone(),
                success_prob: a.success_prob.unwrap_or(0.0),
                detour_rate: a.detour_rate,
                max_detours: a.max_detours,
            })
            .collect()
    }

    pub fn execution(&self) -> ExecutionOptions {
        ExecutionOptions {
            step_budget: self.budgets.step_budget,
            workers: self.budgets.workers,
            timeout: self.budgets.timeout_secs.map(Duration::from_secs),
        }
    }

    pub fn judge_config(&self) -> Result<JudgeConfig, CliError> {
        let guidelines = match &self.judge.guidelines {
            Some(p) => Some(
                fs::read_to_string(p).map_err(|e| CliError::Config(format!("judge.guidelines {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Ok(JudgeConfig {
            model_id: self.judge.model.clone(),
            sampling: SamplingParams {
                temperature: self.judge.temperature,
                ..SamplingParams::default()
            },
            retries: self.judge.retries,
            citing: self.judge.citing,
            guidelines,
        })
    }
}
