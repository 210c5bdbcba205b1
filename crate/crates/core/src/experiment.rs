//! End-to-end experiments: generate candidates, describe them, judge them
//! for every N in a sweep, and report the metrics.
//!
//! Rollouts are generated once per `(task, policy, sample_index)` for the
//! largest N a policy needs, so smaller candidate sets are subsets of larger
//! ones. Every number in a report is a function of the config seeds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::ensemble::{
    derive_seed, execute_specs, plan_candidates, split_evenly, CandidateSpec, EnvironmentFactory, ExecutionOptions, MixtureEntry,
    MixturePlan, PolicyFactory,
};
use crate::judge::{Judge, JudgeConfig, Strategy};
use crate::metrics::{self, RewardMatrix};
use crate::narrative::{
    build_narrative, build_naive_captions, sample_screenshots_only, Captioner, FactError, FactGenerator, NarrativeError,
    Representation,
    RepresentationKind,
};
use crate::prompts::PromptSet;
use crate::raster::ImageDigest;
use crate::sim::judges::OracleJudge;
use crate::trajectory::{Rollout, Task};
use crate::vlm::ChatBackend;

pub const REPORT_FILE: &str = "report.tsv";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Policies to mix; each entry's `count` is ignored and replaced by an
    /// even split of N.
    pub mixture: Vec<MixtureEntry>,
    pub n_sweep: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub representation: RepresentationKind,
    pub judge: JudgeConfig,
    pub judge_seed: u64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub execution: ExecutionOptions,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mixture: Vec::new(),
            n_sweep: vec![1],
            strategies: vec![Strategy::Mcq],
            representation: RepresentationKind::BehaviorNarrative,
            judge: JudgeConfig::default(),
            judge_seed: 0,
            bootstrap_resamples: metrics::DEFAULT_RESAMPLES,
            bootstrap_seed: 0,
            execution: ExecutionOptions::default(),
            augment: AugmentConfig::desk_scale(),
        }
    }
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mixture.is_empty() {
            out.push("mixture lists no policies".to_string());
        }
        if self.n_sweep.is_empty() {
            out.push("N sweep is empty".to_string());
        }
        if self.n_sweep.contains(&0) {
            out.push("N sweep contains 0".to_string());
        }
        if self.strategies.is_empty() {
            out.push("no judge strategy selected".to_string());
        }
        out
    }

    pub fn plan_for(&self, n: usize) -> MixturePlan {
        split_evenly(&self.mixture, n)
    }
}

/// Where judge answers come from.
pub enum JudgeSource<'a> {
    Backend(&'a dyn ChatBackend),
    /// Reads each task's true rewards; for measuring the selection ceiling.
    Oracle,
}

pub struct Harness<'a> {
    pub environments: &'a dyn EnvironmentFactory,
    pub policies: &'a dyn PolicyFactory,
    pub reward: &'a (dyn Fn(&Task, &Rollout) -> u8 + Sync),
    pub facts: &'a dyn FactGenerator,
    pub captioner: Option<&'a dyn Captioner>,
    pub prompts: &'a PromptSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub message: String,
    /// The model backend could not be reached.
    #[serde(default)]
    pub backend: bool,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("no tasks to run")]
    NoTasks,
    #[error("{} task(s) failed: {}", .0.len(), .0.iter().map(|f| format!("{}: {}", f.task_id, f.message)).collect::<Vec<_>>().join("; "))]
    Tasks(Vec<TaskFailure>),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("writing {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Every rollout generated for one task, with rewards and the
/// N-independent representation of each.
pub struct TaskPool {
    pub task: Task,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<u8>,
    described: Vec<Option<Representation>>,
    index: HashMap<(String, u32), usize>,
}

impl TaskPool {
    /// Candidates for `plan`, in plan order, with their rewards.
    pub fn candidates(&self, plan: &MixturePlan, kind: RepresentationKind) -> (Vec<Representation>, Vec<u8>, Vec<String>) {
        let mut reps = Vec::new();
        let mut rewards = Vec::new();
        let mut labels = Vec::new();
        let n = plan.total();
        for spec in plan_candidates(plan) {
            let i = self.index[&(spec.policy_id.clone(), spec.sample_index)];
            reps.push(match kind {
                RepresentationKind::ScreenshotsOnly => sample_screenshots_only(&self.rollouts[i], n),
                _ => self.described[i].clone().expect("described when collected"),
            });
            rewards.push(self.rewards[i]);
            labels.push(format!("{}#{}", spec.policy_id, spec.sample_index));
        }
        (reps, rewards, labels)
    }

    pub fn final_rewards(&self) -> HashMap<ImageDigest, f64> {
        self.rollouts
            .iter()
            .zip(&self.rewards)
            .map(|(r, &w)| (r.final_screenshot().image.digest(), w as f64))
            .collect()
    }
}

/// Candidate specs covering every N of the sweep: each policy gets as many
/// samples as its largest share.
pub fn sweep_specs(config: &ExperimentConfig) -> Vec<CandidateSpec> {
    let mut widest: Vec<MixtureEntry> = config.mixture.iter().map(|e| MixtureEntry { count: 0, ..e.clone() }).collect();
    for &n in &config.n_sweep {
        for e in config.plan_for(n).entries {
            if let Some(w) = widest.iter_mut().find(|w| w.policy_id == e.policy_id) {
                w.count = w.count.max(e.count);
            }
        }
    }
    plan_candidates(&MixturePlan { entries: widest })
}

fn check(tasks: &[Task], config: &ExperimentConfig) -> Result<(), ExperimentError> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(ExperimentError::InvalidConfig(problems));
    }
    if tasks.is_empty() {
        return Err(ExperimentError::NoTasks);
    }
    Ok(())
}

impl TaskPool {
    /// Runs and scores every rollout in `specs` for one task, then describes
    /// them.
    pub fn prepare(task: &Task, specs: &[CandidateSpec], config: &ExperimentConfig, harness: &Harness<'_>) -> Result<Self, TaskFailure> {
        let rollouts = execute_specs(specs, task, harness.environments, harness.policies, &config.execution);
        let rewards: Vec<u8> = rollouts.iter().map(|r| (harness.reward)(task, r)).collect();
        let mut pool = TaskPool {
            task: task.clone(),
            described: vec![None; rollouts.len()],
            rollouts,
            rewards,
            index: specs
                .iter()
                .enumerate()
                .map(|(i, s)| ((s.policy_id.clone(), s.sample_index), i))
                .collect(),
        };
        pool.describe(config, harness)?;
        Ok(pool)
    }

    /// (Re)builds every representation with the harness's fact generator or
    /// captioner.
    pub fn describe(&mut self, config: &ExperimentConfig, harness: &Harness<'_>) -> Result<(), TaskFailure> {
        self.described = self
            .rollouts
            .iter()
            .map(|r| describe(r, &self.task, config, harness))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|(message, backend)| TaskFailure {
                task_id: self.task.id.clone(),
                message,
                backend,
            })?;
        Ok(())
    }
}

/// Prepares a pool for every task. Holds every rollout in memory; prefer
/// [`run_experiment`] for large task sets.
pub fn collect(tasks: &[Task], config: &ExperimentConfig, harness: &Harness<'_>) -> Result<Vec<TaskPool>, ExperimentError> {
    check(tasks, config)?;
    let specs = sweep_specs(config);
    gather(tasks.par_iter().map(|t| TaskPool::prepare(t, &specs, config, harness)).collect())
}

fn gather<T>(results: Vec<Result<T, TaskFailure>>) -> Result<Vec<T>, ExperimentError> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(ExperimentError::Tasks(failures))
    }
}

fn describe(
    rollout: &Rollout,
    task: &Task,
    config: &ExperimentConfig,
    harness: &Harness<'_>,
) -> Result<Option<Representation>, (String, bool)> {
    let label = |e: NarrativeError| {
        let backend = matches!(
            e,
            NarrativeError::Step {
                source: FactError::BackendUnavailable(_),
                ..
            }
        );
        (format!("{}#{}: {e}", rollout.policy_id, rollout.sample_index), backend)
    };
    match config.representation {
        RepresentationKind::BehaviorNarrative => build_narrative(rollout, task, harness.facts, &config.augment)
            .map(|n| Some(Representation::BehaviorNarrative(n)))
            .map_err(label),
        RepresentationKind::NaiveCaptions => {
            let captioner = harness
                .captioner
                .ok_or_else(|| ("naive captions need a captioner".to_string(), false))?;
            build_naive_captions(rollout, task, captioner).map(Some).map_err(label)
        }
        RepresentationKind::ScreenshotsOnly => Ok(None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub n: usize,
    pub strategy: Strategy,
    pub task_id: String,
    pub candidates: Vec<String>,
    pub rewards: Vec<u8>,
    pub chosen_index: usize,
    pub chosen_reward: u8,
    pub judge_calls: usize,
    pub trajectory_inputs: usize,
    pub backend_requests: u32,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub strategy: Strategy,
    pub representation: RepresentationKind,
    pub citing: bool,
    pub tasks: usize,
    pub success_rate: f64,
    pub sr_ci_low: f64,
    pub sr_ci_high: f64,
    pub pass_at_n: f64,
    pub subset_size: usize,
    pub subset_accuracy: Option<f64>,
    pub judge_calls: usize,
    pub trajectory_inputs: usize,
    pub backend_requests: u64,
    pub fallbacks: usize,
    pub prompt_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub records: Vec<TaskRecord>,
}

/// Records for one pool, every N and strategy of the sweep.
pub fn judge_task(pool: &TaskPool, config: &ExperimentConfig, judge: &JudgeSource<'_>, prompts: &PromptSet) -> Result<Vec<TaskRecord>, TaskFailure> {
    let mut out = Vec::new();
    for &n in &config.n_sweep {
        let plan = config.plan_for(n);
        for &strategy in &config.strategies {
            out.push(judge_pool(pool, &plan, n, strategy, config, judge, prompts)?);
        }
    }
    Ok(out)
}

/// Judges prepared pools.
pub fn evaluate(pools: &[TaskPool], config: &ExperimentConfig, judge: &JudgeSource<'_>, prompts: &PromptSet) -> Result<Report, ExperimentError> {
    if pools.is_empty() {
        return Err(ExperimentError::NoTasks);
    }
    let per_task = gather(pools.par_iter().map(|p| judge_task(p, config, judge, prompts)).collect())?;
    report_from(per_task, config, prompts)
}

/// Aggregates per-task records (task order preserved) into report rows.
fn report_from(per_task: Vec<Vec<TaskRecord>>, config: &ExperimentConfig, prompts: &PromptSet) -> Result<Report, ExperimentError> {
    let digest = prompts.judge_digest(config.judge.citing);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &n in &config.n_sweep {
        for &strategy in &config.strategies {
            let batch: Vec<TaskRecord> = per_task
                .iter()
                .flatten()
                .filter(|r| r.n == n && r.strategy == strategy)
                .cloned()
                .collect();
            rows.push(summarize(&batch, n, strategy, config, &digest)?);
            records.extend(batch);
        }
    }
    Ok(Report { rows, records })
}

fn judge_pool(
    pool: &TaskPool,
    plan: &MixturePlan,
    n: usize,
    strategy: Strategy,
    config: &ExperimentConfig,
    source: &JudgeSource<'_>,
    prompts: &PromptSet,
) -> Result<TaskRecord, TaskFailure> {
    let (reps, rewards, candidates) = pool.candidates(plan, config.representation);
    let oracle;
    let backend: &dyn ChatBackend = match source {
        JudgeSource::Backend(b) => *b,
        JudgeSource::Oracle => {
            oracle = OracleJudge::new(pool.final_rewards());
            &oracle
        }
    };
    let judge = Judge::new(backend, prompts, config.judge.clone());
    let seed = derive_seed(config.judge_seed, &pool.task.id, n as u32);
    let result = judge
        .select_or_fallback(strategy, &reps, &pool.task, seed)
        .map_err(|e| TaskFailure {
            task_id: pool.task.id.clone(),
            message: e.to_string(),
            backend: false,
        })?;
    Ok(TaskRecord {
        n,
        strategy,
        task_id: pool.task.id.clone(),
        chosen_reward: rewards[result.chosen_index - 1],
        candidates,
        rewards,
        chosen_index: result.chosen_index,
        judge_calls: result.judge_calls,
        trajectory_inputs: result.trajectory_inputs_consumed,
        backend_requests: result.backend_requests,
        fallback: result.fallback,
        failure: result.failure,
    })
}

fn summarize(
    batch: &[TaskRecord],
    n: usize,
    strategy: Strategy,
    config: &ExperimentConfig,
    digest: &str,
) -> Result<ReportRow, ExperimentError> {
    let matrix = RewardMatrix::new(batch.iter().map(|r| r.rewards.clone()).collect())?;
    let choices: Vec<usize> = batch.iter().map(|r| r.chosen_index).collect();
    let chosen = matrix.chosen(&choices)?;
    let values: Vec<f64> = chosen.iter().map(|&c| c as f64).collect();
    let (lo, hi) = metrics::bootstrap_ci(
        &values,
        config.bootstrap_resamples.max(1),
        derive_seed(config.bootstrap_seed, "bootstrap", n as u32),
        0.95,
    )?;
    let subset = metrics::judge_subset_accuracy(&matrix, &choices)?;
    Ok(ReportRow {
        n,
        strategy,
        representation: config.representation,
        citing: config.judge.citing,
        tasks: batch.len(),
        success_rate: metrics::success_rate(&chosen)?,
        sr_ci_low: lo,
        sr_ci_high: hi,
        pass_at_n: metrics::pass_at_n(&matrix)?,
        subset_size: subset.subset_size,
        subset_accuracy: subset.accuracy,
        judge_calls: batch.iter().map(|r| r.judge_calls).sum(),
        trajectory_inputs: batch.iter().map(|r| r.trajectory_inputs).sum(),
        backend_requests: batch.iter().map(|r| r.backend_requests as u64).sum(),
        fallbacks: batch.iter().filter(|r| r.fallback).count(),
        prompt_digest: digest.to_string(),
    })
}

/// Generates, describes and judges one task at a time, so only the frames
/// of the tasks in flight are held in memory.
pub fn run_experiment(
    tasks: &[Task],
    config: &ExperimentConfig,
    harness: &Harness<'_>,
    judge: &JudgeSource<'_>,
) -> Result<Report, ExperimentError> {
    check(tasks, config)?;
    let specs = sweep_specs(config);
    let per_task = gather(
        tasks
            .par_iter()
            .map(|t| {
                let pool = TaskPool::prepare(t, &specs, config, harness)?;
                judge_task(&pool, config, judge, harness.prompts)
            })
            .collect(),
    )?;
    report_from(per_task, config, harness.prompts)
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Mcq => "mcq",
        Strategy::IterativePairwise => "iterative",
        Strategy::IndependentRank => "independent",
    }
}

fn representation_name(r: RepresentationKind) -> &'static str {
    match r {
        RepresentationKind::BehaviorNarrative => "narrative",
        RepresentationKind::NaiveCaptions => "captions",
        RepresentationKind::ScreenshotsOnly => "screenshots",
    }
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "n",
    "strategy",
    "representation",
    "citing",
    "tasks",
    "success_rate",
    "sr_ci_low",
    "sr_ci_high",
    "pass_at_n",
    "subset_size",
    "subset_accuracy",
    "judge_calls",
    "trajectory_inputs",
    "backend_requests",
    "fallbacks",
    "prompt_digest",
];

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let accuracy = r.subset_accuracy.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.n,
                strategy_name(r.strategy),
                representation_name(r.representation),
                r.citing,
                r.tasks,
                r.success_rate,
                r.sr_ci_low,
                r.sr_ci_high,
                r.pass_at_n,
                r.subset_size,
                accuracy,
                r.judge_calls,
                r.trajectory_inputs,
                r.backend_requests,
                r.fallbacks,
                r.prompt_digest,
            );
        }
        out
    }

    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `report.tsv` and `records.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), ExperimentError> {
        let io = |path: &Path, e: std::io::Error| ExperimentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let report = dir.join(REPORT_FILE);
        let records = dir.join(RECORDS_FILE);
        fs::write(&report, self.to_tsv()).map_err(|e| io(&report, e))?;
        fs::write(&records, self.records_jsonl()).map_err(|e| io(&records, e))?;
        Ok((report, records))
    }

    pub fn read_records(path: &Path) -> Result<Vec<TaskRecord>, ExperimentError> {
        let io = |message: String| ExperimentError::Io {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| io(e.to_string())))
            .collect()
    }
}
