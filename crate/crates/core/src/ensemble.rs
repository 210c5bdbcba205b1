//! Mixture plans and parallel rollout execution.
//!
//! A [`MixturePlan`] says how many samples to draw from each policy. It
//! expands into [`CandidateSpec`]s with stable per-sample seeds, and
//! [`execute_candidates`] runs each spec against its own fresh environment
//! on a bounded set of worker threads.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{CodeExecutor, CodeSessionReport};
use crate::trajectory::{
    Action, ActionKind, CandidateSet, MixtureCount, Rollout, Screenshot, Step, Task, TerminalReason,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub policy_id: String,
    #[serde(default)]
    pub model_id: String,
    pub count: u32,
    #[serde(default)]
    pub base_seed: u64,
    /// Sampling temperature for this policy; backends choose when unset.
    #[serde(default)]
    pub temperature: Option<f32>,
}

impl MixtureEntry {
    pub fn new(policy_id: impl Into<String>, count: u32, base_seed: u64) -> Self {
        MixtureEntry {
            policy_id: policy_id.into(),
            model_id: String::new(),
            count,
            base_seed,
            temperature: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturePlan {
    pub entries: Vec<MixtureEntry>,
}

impl MixturePlan {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count as usize).sum()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.entries.is_empty() {
            out.push("mixture plan has no entries".to_string());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.count == 0 {
                out.push(format!("entry {} ({}) has count 0", i + 1, e.policy_id));
            }
            if self.entries[..i].iter().any(|p| p.policy_id == e.policy_id) {
                out.push(format!("policy id {:?} appears more than once", e.policy_id));
            }
        }
        out
    }

    pub fn counts(&self) -> Vec<MixtureCount> {
        self.entries
            .iter()
            .map(|e| MixtureCount {
                policy_id: e.policy_id.clone(),
                count: e.count,
            })
            .collect()
    }
}

/// Spreads `n` samples over `policies` as evenly as possible: every policy
/// gets `n / M`, the first `n % M` get one more, and policies left with zero
/// samples are dropped.
pub fn split_evenly(policies: &[MixtureEntry], n: usize) -> MixturePlan {
    let m = policies.len();
    if m == 0 {
        return MixturePlan::default();
    }
    let entries = policies
        .iter()
        .enumerate()
        .map(|(i, p)| MixtureEntry {
            count: (n / m + usize::from(i < n % m)) as u32,
            ..p.clone()
        })
        .filter(|e| e.count > 0)
        .collect();
    MixturePlan { entries }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub policy_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_bits: Option<u32>,
}

impl CandidateSpec {
    pub fn temperature(&self) -> Option<f32> {
        self.temperature_bits.map(f32::from_bits)
    }
}

/// First eight bytes (little endian) of a SHA-256 over a version tag, the
/// base seed, the policy id and the sample index.
pub fn derive_seed(base_seed: u64, policy_id: &str, sample_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"widescale-seed-v1");
    h.update(base_seed.to_le_bytes());
    h.update((policy_id.len() as u64).to_le_bytes());
    h.update(policy_id.as_bytes());
    h.update(sample_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Expands the plan in entry order, sample indices `0..count` per entry.
pub fn plan_candidates(plan: &MixturePlan) -> Vec<CandidateSpec> {
    plan.entries
        .iter()
        .flat_map(|e| {
            (0..e.count).map(move |i| CandidateSpec {
                policy_id: e.policy_id.clone(),
                model_id: e.model_id.clone(),
                sample_index: i,
                seed: derive_seed(e.base_seed, &e.policy_id, i),
                temperature_bits: e.temperature.map(f32::to_bits),
            })
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RolloutError {
    #[error("environment error: {0}")]
    Env(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("panic: {0}")]
    Panic(String),
}

/// One isolated environment instance, started from the task's snapshot.
pub trait Environment: Send {
    /// Loads the initial snapshot and returns `s_0`.
    fn reset(&mut self) -> Result<Screenshot, RolloutError>;
    /// Executes `action` and returns the screenshot captured after it.
    fn step(&mut self, action: &Action) -> Result<Screenshot, RolloutError>;
    /// Runs code on behalf of the code agent, against this instance.
    fn code_executor(&mut self) -> &mut dyn CodeExecutor;
}

pub trait EnvironmentFactory: Sync {
    fn create(&self, task: &Task, seed: u64) -> Result<Box<dyn Environment>, RolloutError>;
}

pub trait Policy: Send {
    fn next_action(&mut self, task: &Task, screenshot: &Screenshot, step: usize) -> Result<Action, RolloutError>;

    /// Handles a `CodeCall` action. The default refuses, which ends the
    /// rollout with an environment error.
    fn run_code(
        &mut self,
        _task: &Task,
        _subtask: Option<&str>,
        _screenshot: &Screenshot,
        _executor: &mut dyn CodeExecutor,
    ) -> Result<CodeSessionReport, RolloutError> {
        Err(RolloutError::Policy("this policy cannot run code sessions".to_string()))
    }
}

pub trait PolicyFactory: Sync {
    fn create(&self, spec: &CandidateSpec, task: &Task) -> Result<Box<dyn Policy>, RolloutError>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecutionOptions {
    /// Maximum actions per rollout; `None` uses the task budget.
    pub step_budget: Option<u32>,
    /// Concurrent rollouts; `0` means `min(N, available cores)`.
    pub workers: usize,
    /// Wall-clock limit per rollout, checked between steps.
    pub timeout: Option<Duration>,
}

fn guarded<T>(f: impl FnOnce() -> Result<T, RolloutError>) -> Result<T, RolloutError> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let message = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".to_string());
        Err(RolloutError::Panic(message))
    })
}

/// Runs one rollout to termination. Errors and panics end the rollout with
/// [`TerminalReason::EnvError`]; a rollout that ends without any step gets a
/// single `Fail` step carrying the diagnostic so it stays well formed.
pub fn run_rollout(
    spec: &CandidateSpec,
    task: &Task,
    environments: &dyn EnvironmentFactory,
    policies: &dyn PolicyFactory,
    options: &ExecutionOptions,
) -> Rollout {
    let started = Instant::now();
    let budget = options.step_budget.unwrap_or(task.step_budget) as usize;
    let mut steps: Vec<Step> = Vec::new();
    let mut initial: Option<Screenshot> = None;
    let outcome = (|| -> Result<TerminalReason, RolloutError> {
        let mut env = guarded(|| environments.create(task, spec.seed))?;
        let mut policy = guarded(|| policies.create(spec, task))?;
        let first = guarded(|| env.reset())?;
        initial = Some(first.clone());
        let mut current = first;
        for step in 0..budget {
            if options.timeout.is_some_and(|t| started.elapsed() > t) {
                tracing::warn!(policy = %spec.policy_id, sample = spec.sample_index, "rollout timed out");
                return Ok(TerminalReason::BudgetExhausted);
            }
            let action = guarded(|| policy.next_action(task, &current, step))?;
            let code_report = if action.kind == ActionKind::CodeCall {
                let subtask = action.text.as_deref();
                Some(guarded(|| policy.run_code(task, subtask, &current, env.code_executor()))?)
            } else {
                None
            };
            let after = guarded(|| env.step(&action))?;
            let kind = action.kind;
            steps.push(Step {
                action,
                screenshot: after.clone(),
                code_report,
            });
            current = after;
            match kind {
                ActionKind::Done => return Ok(TerminalReason::AgentDone),
                ActionKind::Fail => return Ok(TerminalReason::AgentFail),
                _ => {}
            }
        }
        Ok(TerminalReason::BudgetExhausted)
    })();
    let terminal_reason = match outcome {
        Ok(reason) => reason,
        Err(e) => {
            tracing::warn!(policy = %spec.policy_id, sample = spec.sample_index, error = %e, "rollout aborted");
            if steps.is_empty() {
                let frame = initial
                    .clone()
                    .unwrap_or_else(|| Screenshot::new(RgbImage::new(1, 1), 0, 0));
                steps.push(Step::new(Action::fail_with(&e.to_string()), frame));
            }
            TerminalReason::EnvError
        }
    };
    let initial_screenshot = initial.unwrap_or_else(|| steps[0].screenshot.clone());
    Rollout {
        task_id: task.id.clone(),
        policy_id: spec.policy_id.clone(),
        sample_index: spec.sample_index,
        seed: spec.seed,
        initial_screenshot,
        steps,
        terminal_reason,
    }
}

pub fn default_workers(n: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    n.min(cores).max(1)
}

/// Runs every spec on its own environment. The result keeps spec order no
/// matter which rollout finishes first.
pub fn execute_specs(
    specs: &[CandidateSpec],
    task: &Task,
    environments: &dyn EnvironmentFactory,
    policies: &dyn PolicyFactory,
    options: &ExecutionOptions,
) -> Vec<Rollout> {
    let workers = if options.workers == 0 {
        default_workers(specs.len())
    } else {
        options.workers.min(specs.len()).max(1)
    };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Rollout>>> = Mutex::new(vec![None; specs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = specs.get(i) else { break };
                let rollout = run_rollout(spec, task, environments, policies, options);
                slots.lock().unwrap()[i] = Some(rollout);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every spec produced a rollout"))
        .collect()
}

pub fn execute_candidates(
    plan: &MixturePlan,
    task: &Task,
    environments: &dyn EnvironmentFactory,
    policies: &dyn PolicyFactory,
    options: &ExecutionOptions,
) -> CandidateSet {
    let rollouts = execute_specs(&plan_candidates(plan), task, environments, policies, options);
    CandidateSet {
        task_id: task.id.clone(),
        rollouts,
        mixture_plan: plan.counts(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(ids: &[&str]) -> Vec<MixtureEntry> {
        ids.iter().map(|id| MixtureEntry::new(*id, 1, 42)).collect()
    }

    #[test]
    fn split_evenly_distributes_remainder_first() {
        let plan = split_evenly(&entries(&["a", "b", "c"]), 7);
        let counts: Vec<u32> = plan.entries.iter().map(|e| e.count).collect();
        assert_eq!(counts, vec![3, 2, 2]);
        let plan = split_evenly(&entries(&["a", "b", "c"]), 2);
        let ids: Vec<&str> = plan.entries.iter().map(|e| e.policy_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(split_evenly(&entries(&["a", "b"]), 4).total(), 4);
    }

    #[test]
    fn plan_order_and_seeds_are_stable() {
        let plan = MixturePlan {
            entries: vec![MixtureEntry::new("p", 2, 1), MixtureEntry::new("q", 2, 1)],
        };
        let specs = plan_candidates(&plan);
        let order: Vec<(&str, u32)> = specs.iter().map(|s| (s.policy_id.as_str(), s.sample_index)).collect();
        assert_eq!(order, vec![("p", 0), ("p", 1), ("q", 0), ("q", 1)]);
        assert_eq!(specs, plan_candidates(&plan));
        let mut seeds: Vec<u64> = specs.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn plan_violations() {
        let plan = MixturePlan {
            entries: vec![MixtureEntry::new("p", 0, 1), MixtureEntry::new("p", 2, 1)],
        };
        assert_eq!(plan.violations().len(), 2);
        assert!(MixturePlan::default().violations().len() == 1);
    }
}
