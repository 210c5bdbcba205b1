//! Scripted agents for the simulator.
//!
//! A scripted policy draws one Bernoulli per seed: heads replays one of the
//! task's solutions, tails one of its near-misses. Harmless detours (pointer
//! moves, waits, scrolls, clicks on empty cells) are sprinkled in so samples
//! of the same outcome still look different. Code calls go through the real
//! code-session loop with a generator that replays the script's blocks.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::taskpack::{Script, SimTask};
use super::{cell_center, CELL_COUNT, SCREEN_HEIGHT, SCREEN_WIDTH};
use crate::agent::{run_code_session, CodeAgentConfig, CodeExecutor, CodeSessionReport, CODE_STEP_HEADER};
use crate::ensemble::{derive_seed, CandidateSpec, Policy, PolicyFactory, RolloutError};
use crate::prompts::{self, PromptSet};
use crate::trajectory::{Action, ActionKind, Screenshot, Task};
use crate::vlm::{BackendError, ChatBackend, ChatRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedProfile {
    pub policy_id: String,
    /// Probability that a sample follows a solution.
    pub success_prob: f64,
    /// Chance of a detour before each scripted action.
    #[serde(default)]
    pub detour_rate: f64,
    #[serde(default = "default_max_detours")]
    pub max_detours: u32,
}

fn default_max_detours() -> u32 {
    4
}

impl ScriptedProfile {
    pub fn new(policy_id: impl Into<String>, success_prob: f64) -> Self {
        ScriptedProfile {
            policy_id: policy_id.into(),
            success_prob,
            detour_rate: 0.25,
            max_detours: default_max_detours(),
        }
    }
}

/// What a seed decides for a task: the chosen script, detours included.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedPlan {
    pub follows_solution: bool,
    pub actions: Vec<Action>,
    pub code: Vec<String>,
}

fn detour(task: &SimTask, rng: &mut ChaCha8Rng) -> Action {
    match rng.random_range(0..4u8) {
        0 => Action::move_to(rng.random_range(0..SCREEN_WIDTH), rng.random_range(0..SCREEN_HEIGHT)),
        1 => Action::wait(1),
        2 => Action::scroll(SCREEN_WIDTH / 2, SCREEN_HEIGHT / 2, if rng.random_bool(0.5) { 3 } else { -3 }),
        _ => {
            let empty: Vec<u8> = (0..CELL_COUNT)
                .filter(|c| !task.initial.cells.contains_key(c) && !drop_targets(task).contains(c))
                .collect();
            match empty.choose(rng) {
                Some(&c) => {
                    let (x, y) = cell_center(c);
                    Action::click(x, y)
                }
                None => Action::wait(1),
            }
        }
    }
}

fn drop_targets(task: &SimTask) -> Vec<u8> {
    task.solutions
        .iter()
        .chain(&task.distractors)
        .flat_map(|s| &s.actions)
        .filter(|a| a.kind == ActionKind::DragTo)
        .filter_map(|a| a.pointer_end)
        .filter_map(|p| super::cell_at(p.x, p.y))
        .collect()
}

pub fn plan(task: &SimTask, profile: &ScriptedProfile, seed: u64) -> ScriptedPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let follows_solution = rng.random_bool(profile.success_prob.clamp(0.0, 1.0));
    let pool: &[Script] = if follows_solution { &task.solutions } else { &task.distractors };
    let chosen = pool.choose(&mut rng).expect("task has scripts");
    let mut actions = Vec::with_capacity(chosen.actions.len() + profile.max_detours as usize);
    let mut detours = 0;
    for a in &chosen.actions {
        if detours < profile.max_detours && rng.random_bool(profile.detour_rate.clamp(0.0, 1.0)) {
            actions.push(detour(task, &mut rng));
            detours += 1;
        }
        actions.push(a.clone());
    }
    ScriptedPlan {
        follows_solution,
        actions,
        code: chosen.code.clone(),
    }
}

/// Code generator that replays fixed bash blocks, one per turn, then says
/// `DONE`. Summary requests get a one-line summary.
pub struct ScriptedCodeBackend {
    pub blocks: Vec<String>,
    summarizer_system: String,
}

impl ScriptedCodeBackend {
    pub fn new(blocks: Vec<String>, prompts: &PromptSet) -> Self {
        ScriptedCodeBackend {
            blocks,
            summarizer_system: prompts.get(prompts::CODE_SUMMARIZER).text.clone(),
        }
    }
}

impl ChatBackend for ScriptedCodeBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let executed = request
            .parts
            .iter()
            .filter(|p| p.as_text().is_some_and(|t| t.starts_with(CODE_STEP_HEADER)))
            .count();
        if request.system == self.summarizer_system {
            return Ok(format!(
                "<thoughts>Replayed script.</thoughts><answer>Ran {executed} scripted block(s) against the registry.</answer>"
            ));
        }
        Ok(match self.blocks.get(executed) {
            Some(code) => format!("<thoughts>Next block.</thoughts><answer>```bash\n{code}\n```</answer>"),
            None => "<thoughts>Script finished.</thoughts><answer>DONE</answer>".to_string(),
        })
    }
}

pub struct ScriptedPolicy {
    actions: std::vec::IntoIter<Action>,
    code: ScriptedCodeBackend,
    prompts: PromptSet,
    config: CodeAgentConfig,
}

impl Policy for ScriptedPolicy {
    fn next_action(&mut self, _task: &Task, _screenshot: &Screenshot, _step: usize) -> Result<Action, RolloutError> {
        Ok(self.actions.next().unwrap_or_else(Action::fail))
    }

    fn run_code(
        &mut self,
        task: &Task,
        subtask: Option<&str>,
        screenshot: &Screenshot,
        executor: &mut dyn CodeExecutor,
    ) -> Result<CodeSessionReport, RolloutError> {
        run_code_session(
            subtask.unwrap_or(&task.instruction),
            screenshot,
            executor,
            &self.code,
            &self.prompts,
            &self.config,
        )
        .map_err(|e| RolloutError::Env(e.to_string()))
    }
}

pub struct ScriptedPolicyFactory {
    tasks: HashMap<String, SimTask>,
    profiles: HashMap<String, ScriptedProfile>,
    prompts: PromptSet,
}

impl ScriptedPolicyFactory {
    pub fn new(tasks: &[SimTask], profiles: &[ScriptedProfile], prompts: PromptSet) -> Self {
        ScriptedPolicyFactory {
            tasks: tasks.iter().map(|t| (t.task.id.clone(), t.clone())).collect(),
            profiles: profiles.iter().map(|p| (p.policy_id.clone(), p.clone())).collect(),
            prompts,
        }
    }

    pub fn shared(tasks: &[SimTask], profiles: &[ScriptedProfile]) -> Arc<Self> {
        Arc::new(Self::new(tasks, profiles, PromptSet::builtin()))
    }
}

impl PolicyFactory for ScriptedPolicyFactory {
    fn create(&self, spec: &CandidateSpec, task: &Task) -> Result<Box<dyn Policy>, RolloutError> {
        let sim = self
            .tasks
            .get(&task.id)
            .ok_or_else(|| RolloutError::Policy(format!("unknown sim task {:?}", task.id)))?;
        let profile = self
            .profiles
            .get(&spec.policy_id)
            .ok_or_else(|| RolloutError::Policy(format!("unknown scripted policy {:?}", spec.policy_id)))?;
        // Candidate seeds do not depend on the task; mix it in so outcomes
        // are independent across tasks.
        let p = plan(sim, profile, derive_seed(spec.seed, &task.id, 0));
        let config = CodeAgentConfig {
            model_id: spec.policy_id.clone(),
            ..CodeAgentConfig::default()
        };
        Ok(Box::new(ScriptedPolicy {
            actions: p.actions.into_iter(),
            code: ScriptedCodeBackend::new(p.code, &self.prompts),
            prompts: self.prompts.clone(),
            config,
        }))
    }
}
