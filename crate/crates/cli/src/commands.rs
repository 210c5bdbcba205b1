//! The subcommands. Every command writes its outputs only after all of its
//! inputs were processed, and reruns with the same config reproduce them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use widescale::agent::{CodeAgentConfig, FlatPolicyConfig, FlatPolicyFactory};
use widescale::augment::augment_transition;
use widescale::ensemble::{
    derive_seed, execute_specs, plan_candidates, split_evenly, CandidateSpec, Policy, PolicyFactory, RolloutError,
};
use widescale::experiment::{run_experiment, ExperimentConfig, Harness, JudgeSource, Report};
use widescale::judge::{Judge, SelectionResult, Strategy};
use widescale::narrative::{
    build_naive_captions, build_narrative, load_narrative, narrative_json, sample_screenshots_only, Caption, Captioner,
    FactGenerator, NaiveCaptions, Representation, RepresentationKind, VlmCaptioner, VlmFactGenerator, NARRATIVE_FILE,
};
use widescale::prompts::PromptSet;
use widescale::sim::facts::{RuleCaptioner, RuleFactGenerator};
use widescale::sim::judges::OracleJudge;
use widescale::sim::scripted::ScriptedPolicyFactory;
use widescale::sim::taskpack::{Family, SimTask, TaskPack};
use widescale::sim::{oracle_reward, replay, SimFactory, StateLedger};
use widescale::trajectory::{frame_file_name, load_rollout, save_rollout, MixtureCount, Rollout, RolloutRef, Task};
use widescale::vlm::ChatBackend;

use crate::backend::{self, BackendSpec};
use crate::config::{AgentKind, GeneratorKind, RunConfig, TaskFilter};
use crate::error::{narrative_error, CliError};

pub const CANDIDATES_FILE: &str = "candidates.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const SCREENSHOTS_FILE: &str = "screenshots.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const AUGMENTED_DIR: &str = "augmented";
const SIDE_FILE_VERSION: u32 = 1;

/// Candidate order of one task directory, written by `rollout`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateIndex {
    pub task_id: String,
    pub mixture_plan: Vec<MixtureCount>,
    /// Rollout directory names, in candidate order.
    pub rollouts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionsFile {
    schema_version: u32,
    rollout: RolloutRef,
    captions: Vec<Caption>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScreenshotsFile {
    schema_version: u32,
    rollout: RolloutRef,
    n_candidates: usize,
    frame_indices: Vec<usize>,
    images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub task_id: String,
    pub representation: RepresentationKind,
    pub chosen_rollout: String,
    pub selection: SelectionResult,
}

/// Fact generator and captioner.
type Describers = (Box<dyn FactGenerator>, Box<dyn Captioner>);

/// Config plus everything loaded from it.
pub struct Context {
    pub config: RunConfig,
    pub backend: BackendSpec,
    pub pack: TaskPack,
    /// The pack's tasks after the config's filter.
    pub tasks: Vec<SimTask>,
    pub prompts: PromptSet,
}

impl Context {
    pub fn new(config: RunConfig, backend: Option<BackendSpec>) -> Result<Self, CliError> {
        let backend = match backend {
            Some(b) => b,
            None => config.backend.parse()?,
        };
        let pack = match &config.paths.tasks {
            Some(p) => TaskPack::load(p).map_err(|e| CliError::data(p.display(), e))?,
            None => TaskPack::bundled(),
        };
        let tasks = filter_tasks(&pack, &config.tasks)?;
        let prompts = match &config.paths.prompts {
            Some(dir) => PromptSet::with_overrides(dir).map_err(|e| CliError::Config(format!("paths.prompts: {e}")))?,
            None => PromptSet::builtin(),
        };
        Ok(Context {
            config,
            backend,
            pack,
            tasks,
            prompts,
        })
    }

    fn sim_task(&self, task_id: &str) -> Result<&SimTask, CliError> {
        self.pack
            .get(task_id)
            .ok_or_else(|| CliError::Data(format!("task {task_id:?} is not in the task pack")))
    }

    /// The judge backend; `None` for the oracle.
    fn judge_backend(&self) -> Result<Option<Arc<dyn ChatBackend>>, CliError> {
        backend::build(&self.backend, &self.pack.tasks, self.config.budgets.max_in_flight)
    }

    /// A backend that can answer policy and description prompts, which the
    /// mock judges cannot.
    fn model_backend(&self, what: &str) -> Result<Arc<dyn ChatBackend>, CliError> {
        match self.backend {
            BackendSpec::Mock(_) => Err(CliError::Config(format!(
                "{what} needs a live, replay or record backend; mock backends only judge"
            ))),
            _ => Ok(self.judge_backend()?.expect("non-mock backends are model backends")),
        }
    }

    fn policies(&self) -> Result<Policies, CliError> {
        let mut flat = HashMap::new();
        for a in self.config.agents.iter().filter(|a| a.kind == AgentKind::Vlm) {
            let config = FlatPolicyConfig {
                model_id: a.model.clone(),
                reflection: a.reflection,
                code: CodeAgentConfig {
                    model_id: a.model.clone(),
                    ..CodeAgentConfig::default()
                },
                ..FlatPolicyConfig::default()
            };
            let factory = FlatPolicyFactory {
                backend: self.model_backend(&format!("agent {:?}", a.id))?,
                prompts: self.prompts.clone(),
                config,
            };
            flat.insert(a.id.clone(), factory);
        }
        Ok(Policies {
            scripted: ScriptedPolicyFactory::new(&self.pack.tasks, &self.config.scripted_profiles(), self.prompts.clone()),
            flat,
        })
    }

    fn describers(
        &self,
        ledger: Arc<StateLedger>,
        tasks: &[SimTask],
    ) -> Result<Describers, CliError> {
        let n = &self.config.narrative;
        Ok(match n.generator {
            GeneratorKind::Rule => (
                Box::new(RuleFactGenerator::new(ledger.clone(), tasks).with_hallucination(n.hallucination_rate, self.config.seed)),
                Box::new(RuleCaptioner::new(ledger)),
            ),
            GeneratorKind::Vlm => {
                let backend = self.model_backend("narrative.generator = \"vlm\"")?;
                let mut facts = VlmFactGenerator::new(backend.clone(), self.prompts.clone(), &n.model);
                facts.retries = n.retries;
                let mut captions = VlmCaptioner::new(backend, self.prompts.clone(), &n.model);
                captions.retries = n.retries;
                (Box::new(facts), Box::new(captions))
            }
        })
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig, CliError> {
        let c = &self.config;
        Ok(ExperimentConfig {
            mixture: c.mixture(),
            n_sweep: c.n_sweep.clone(),
            strategies: c.judge.strategies.clone(),
            representation: c.representation,
            judge: c.judge_config()?,
            judge_seed: c.seed,
            bootstrap_resamples: c.bootstrap.resamples,
            bootstrap_seed: c.seed,
            execution: c.execution(),
            augment: c.augment.clone(),
        })
    }
}

fn filter_tasks(pack: &TaskPack, filter: &TaskFilter) -> Result<Vec<SimTask>, CliError> {
    let families: Vec<Family> = filter
        .families
        .iter()
        .map(|f| {
            [Family::FormFill, Family::MultiPath, Family::BulkEdit]
                .into_iter()
                .find(|x| x.tag() == f)
                .ok_or_else(|| CliError::Config(format!("tasks.families: unknown family {f:?}")))
        })
        .collect::<Result<_, _>>()?;
    for id in &filter.ids {
        if pack.get(id).is_none() {
            return Err(CliError::Config(format!("tasks.ids: unknown task {id:?}")));
        }
    }
    let mut out: Vec<SimTask> = pack
        .tasks
        .iter()
        .filter(|t| filter.ids.is_empty() || filter.ids.contains(&t.task.id))
        .filter(|t| families.is_empty() || families.contains(&t.family))
        .cloned()
        .collect();
    if let Some(limit) = filter.limit {
        out.truncate(limit);
    }
    Ok(out)
}

/// Scripted agents plus one flat policy factory per VLM agent.
struct Policies {
    scripted: ScriptedPolicyFactory,
    flat: HashMap<String, FlatPolicyFactory>,
}

impl PolicyFactory for Policies {
    fn create(&self, spec: &CandidateSpec, task: &Task) -> Result<Box<dyn Policy>, RolloutError> {
        match self.flat.get(&spec.policy_id) {
            Some(f) => f.create(spec, task),
            None => self.scripted.create(spec, task),
        }
    }
}

pub fn rollout_dir_name(r: &Rollout) -> String {
    format!("{}-{:03}", r.policy_id, r.sample_index)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::data(parent.display(), e))?;
    }
    fs::write(path, text).map_err(|e| CliError::data(path.display(), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn clear_task_dir(dir: &Path) -> Result<(), CliError> {
    if dir.join(CANDIDATES_FILE).is_file() {
        fs::remove_dir_all(dir).map_err(|e| CliError::data(dir.display(), e))?;
    } else if fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some()) {
        return Err(CliError::Data(format!(
            "{} exists and was not written by `rollout`; refusing to overwrite it",
            dir.display()
        )));
    }
    Ok(())
}

/// Runs the mixture on every selected task and writes
/// `<rollouts>/<task>/<policy>-<index>/`. Returns the task directories.
pub fn cmd_rollout(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    if ctx.tasks.is_empty() {
        return Err(CliError::Data("no tasks selected".to_string()));
    }
    let policies = ctx.policies()?;
    let environments = SimFactory::new(&ctx.pack.tasks, StateLedger::new());
    let plan = split_evenly(&ctx.config.mixture(), ctx.config.candidate_count());
    let specs = plan_candidates(&plan);
    let execution = ctx.config.execution();
    let mut written = Vec::new();
    for sim in &ctx.tasks {
        let rollouts = execute_specs(&specs, &sim.task, &environments, &policies, &execution);
        let dir = ctx.config.paths.rollouts.join(&sim.task.id);
        clear_task_dir(&dir)?;
        let mut names = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            let name = rollout_dir_name(r);
            save_rollout(r, &dir.join(&name)).map_err(|e| CliError::data(dir.display(), e))?;
            names.push(name);
        }
        let index = CandidateIndex {
            task_id: sim.task.id.clone(),
            mixture_plan: plan.counts(),
            rollouts: names,
        };
        write_file(&dir.join(CANDIDATES_FILE), &to_json(&index))?;
        tracing::info!(task = %sim.task.id, candidates = rollouts.len(), "rollouts written");
        written.push(dir);
    }
    Ok(written)
}

struct TaskDir {
    dir: PathBuf,
    index: CandidateIndex,
    rollouts: Vec<Rollout>,
}

impl TaskDir {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(CANDIDATES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Data(format!("{}: {e}; expected a task directory written by `rollout`", path.display()))
        })?;
        let index: CandidateIndex = serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
        let rollouts = index
            .rollouts
            .iter()
            .map(|name| load_rollout(&dir.join(name)).map_err(|e| CliError::data(dir.join(name).display(), e)))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(r) = rollouts.iter().find(|r| r.task_id != index.task_id) {
            return Err(CliError::Data(format!(
                "{}: rollout {} belongs to task {:?}",
                dir.display(),
                rollout_dir_name(r),
                r.task_id
            )));
        }
        if rollouts.is_empty() {
            return Err(CliError::Data(format!("{}: no candidates", dir.display())));
        }
        Ok(TaskDir {
            dir: dir.to_path_buf(),
            index,
            rollouts,
        })
    }

    fn rollout_dirs(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.index.rollouts.iter().map(|n| self.dir.join(n))
    }

    /// Replays every rollout into a fresh ledger.
    fn replay(&self, sim: &SimTask) -> Result<Arc<StateLedger>, CliError> {
        let ledger = StateLedger::new();
        for (r, dir) in self.rollouts.iter().zip(self.rollout_dirs()) {
            replay(sim, r, ledger.clone()).map_err(|e| CliError::data(dir.display(), e))?;
        }
        Ok(ledger)
    }
}

/// The given task directories, or every selected task under the rollouts
/// root.
fn task_dirs(ctx: &Context, dirs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    if !dirs.is_empty() {
        return Ok(dirs.to_vec());
    }
    let found: Vec<PathBuf> = ctx
        .tasks
        .iter()
        .map(|t| ctx.config.paths.rollouts.join(&t.task.id))
        .filter(|d| d.join(CANDIDATES_FILE).is_file())
        .collect();
    if found.is_empty() {
        return Err(CliError::Data(format!(
            "no task directories under {}; run `rollout` first",
            ctx.config.paths.rollouts.display()
        )));
    }
    Ok(found)
}

/// Builds the configured representation for every rollout of every task
/// directory and writes them next to the frames. Nothing is written unless
/// every rollout succeeded. Returns the files written.
pub fn cmd_narrate(ctx: &Context, dirs: &[PathBuf], dump_augmented: bool) -> Result<Vec<PathBuf>, CliError> {
    let kind = ctx.config.representation;
    let mut staged: Vec<(PathBuf, String)> = Vec::new();
    let dirs = task_dirs(ctx, dirs)?;
    for dir in &dirs {
        let td = TaskDir::load(dir)?;
        let sim = ctx.sim_task(&td.index.task_id)?;
        let n = td.rollouts.len();
        let ledger = match (kind, ctx.config.narrative.generator) {
            (RepresentationKind::ScreenshotsOnly, _) | (_, GeneratorKind::Vlm) => StateLedger::new(),
            (_, GeneratorKind::Rule) => td.replay(sim)?,
        };
        let (facts, captioner) = match kind {
            RepresentationKind::ScreenshotsOnly => (None, None),
            _ => {
                let (f, c) = ctx.describers(ledger, std::slice::from_ref(sim))?;
                (Some(f), Some(c))
            }
        };
        for (r, rdir) in td.rollouts.iter().zip(td.rollout_dirs()) {
            let (file, text) = match kind {
                RepresentationKind::BehaviorNarrative => {
                    let facts = facts.as_deref().expect("built above");
                    let narrative = build_narrative(r, &sim.task, facts, &ctx.config.augment)
                        .map_err(|e| narrative_error(rdir.display(), e))?;
                    (NARRATIVE_FILE, narrative_json(&narrative))
                }
                RepresentationKind::NaiveCaptions => {
                    let captioner = captioner.as_deref().expect("built above");
                    let Representation::NaiveCaptions(c) =
                        build_naive_captions(r, &sim.task, captioner).map_err(|e| narrative_error(rdir.display(), e))?
                    else {
                        unreachable!("captions builder returns captions")
                    };
                    let file = CaptionsFile {
                        schema_version: SIDE_FILE_VERSION,
                        rollout: c.rollout_ref,
                        captions: c.captions,
                    };
                    (CAPTIONS_FILE, to_json(&file))
                }
                RepresentationKind::ScreenshotsOnly => {
                    let Representation::ScreenshotsOnly(s) = sample_screenshots_only(r, n) else {
                        unreachable!("sampler returns screenshots")
                    };
                    let file = ScreenshotsFile {
                        schema_version: SIDE_FILE_VERSION,
                        rollout: s.rollout_ref,
                        n_candidates: n,
                        images: s.frame_indices.iter().map(|&i| frame_file_name(i)).collect(),
                        frame_indices: s.frame_indices,
                    };
                    (SCREENSHOTS_FILE, to_json(&file))
                }
            };
            staged.push((rdir.join(file), text));
        }
    }
    for (path, text) in &staged {
        write_file(path, text)?;
    }
    if dump_augmented {
        for dir in &dirs {
            let td = TaskDir::load(dir)?;
            for (r, rdir) in td.rollouts.iter().zip(td.rollout_dirs()) {
                dump_augmented_frames(ctx, r, &rdir)?;
            }
        }
    }
    Ok(staged.into_iter().map(|(p, _)| p).collect())
}

/// Debug output: the marked, outlined and zoomed images of every transition.
fn dump_augmented_frames(ctx: &Context, rollout: &Rollout, rollout_dir: &Path) -> Result<(), CliError> {
    let out = rollout_dir.join(AUGMENTED_DIR);
    fs::create_dir_all(&out).map_err(|e| CliError::data(out.display(), e))?;
    for t in widescale::trajectory::transitions(rollout) {
        let a = augment_transition(&t, &ctx.config.augment).map_err(|e| CliError::data(rollout_dir.display(), e))?;
        let mut images = vec![("before", a.before_marked.image.clone()), ("after", a.after_outlined.image.clone())];
        if let Some(z) = a.zoom_crop {
            images.push(("zoom", z));
        }
        for (tag, raster) in images {
            let path = out.join(format!("step_{:04}_{tag}.png", t.index));
            raster.image().save(&path).map_err(|e| CliError::data(path.display(), e))?;
        }
    }
    Ok(())
}

fn load_captions(rollout_dir: &Path, rollout: &Rollout) -> Result<Representation, CliError> {
    let path = rollout_dir.join(CAPTIONS_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}; run `narrate` with captions first", path.display())))?;
    let file: CaptionsFile = serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
    if file.schema_version != SIDE_FILE_VERSION || file.rollout != rollout.reference() {
        return Err(CliError::Data(format!("{}: captions belong to a different rollout", path.display())));
    }
    let frames: Vec<_> = rollout.frames().cloned().collect();
    if file.captions.len() != frames.len() || file.captions.iter().enumerate().any(|(i, c)| c.frame_index != i) {
        return Err(CliError::Data(format!("{}: expected one caption per frame", path.display())));
    }
    Ok(Representation::NaiveCaptions(NaiveCaptions {
        rollout_ref: file.rollout,
        frames,
        captions: file.captions,
    }))
}

/// Judges every task directory with the first configured strategy and writes
/// its `selection.json`. A failing judge selects candidate 1 with the
/// fallback flag set.
pub fn cmd_select(ctx: &Context, dirs: &[PathBuf]) -> Result<Vec<(PathBuf, SelectionFile)>, CliError> {
    let strategy: Strategy = ctx.config.judge.strategies[0];
    let judge_config = ctx.config.judge_config()?;
    let backend = ctx.judge_backend()?;
    let mut staged = Vec::new();
    for dir in task_dirs(ctx, dirs)? {
        let td = TaskDir::load(&dir)?;
        let sim = ctx.sim_task(&td.index.task_id)?;
        let n = td.rollouts.len();
        let reps = td
            .rollouts
            .iter()
            .zip(td.rollout_dirs())
            .map(|(r, rdir)| match ctx.config.representation {
                RepresentationKind::BehaviorNarrative => load_narrative(&rdir, r)
                    .map(Representation::BehaviorNarrative)
                    .map_err(|e| CliError::Data(format!("{e}; run `narrate` first"))),
                RepresentationKind::NaiveCaptions => load_captions(&rdir, r),
                RepresentationKind::ScreenshotsOnly => Ok(sample_screenshots_only(r, n)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let oracle;
        let judge_backend: &dyn ChatBackend = match &backend {
            Some(b) => b.as_ref(),
            None => {
                let ledger = td.replay(sim)?;
                let rewards = td
                    .rollouts
                    .iter()
                    .filter_map(|r| {
                        let digest = r.final_screenshot().image.digest();
                        ledger.get(&digest).map(|s| (digest, oracle_reward(sim, &s) as f64))
                    })
                    .collect();
                oracle = OracleJudge::new(rewards);
                &oracle
            }
        };
        let judge = Judge::new(judge_backend, &ctx.prompts, judge_config.clone());
        let seed = derive_seed(ctx.config.seed, &sim.task.id, n as u32);
        let selection = judge
            .select_or_fallback(strategy, &reps, &sim.task, seed)
            .map_err(|e| CliError::data(dir.display(), e))?;
        let file = SelectionFile {
            task_id: sim.task.id.clone(),
            representation: ctx.config.representation,
            chosen_rollout: td.index.rollouts[selection.chosen_index - 1].clone(),
            selection,
        };
        staged.push((dir.join(SELECTION_FILE), file));
    }
    for (path, file) in &staged {
        write_file(path, &to_json(file))?;
    }
    Ok(staged)
}

/// Runs the configured sweep on the selected tasks and writes the report
/// into the output directory.
pub fn cmd_evaluate(ctx: &Context) -> Result<(Report, PathBuf, PathBuf), CliError> {
    cmd_evaluate_with(ctx, ctx.judge_backend()?)
}

/// [`cmd_evaluate`] with an explicit judge backend; `None` is the oracle.
pub fn cmd_evaluate_with(
    ctx: &Context,
    backend: Option<Arc<dyn ChatBackend>>,
) -> Result<(Report, PathBuf, PathBuf), CliError> {
    let config = ctx.experiment_config()?;
    let policies = ctx.policies()?;
    let ledger = StateLedger::new();
    let environments = SimFactory::new(&ctx.pack.tasks, ledger.clone());
    let (facts, captioner) = ctx.describers(ledger.clone(), &ctx.pack.tasks)?;
    let reward = |task: &Task, rollout: &Rollout| -> u8 {
        let Some(sim) = ctx.pack.get(&task.id) else { return 0 };
        ledger
            .get(&rollout.final_screenshot().image.digest())
            .map_or(0, |s| oracle_reward(sim, &s))
    };
    let harness = Harness {
        environments: &environments,
        policies: &policies,
        reward: &reward,
        facts: facts.as_ref(),
        captioner: Some(captioner.as_ref()),
        prompts: &ctx.prompts,
    };
    let judge = match &backend {
        Some(b) => JudgeSource::Backend(b.as_ref()),
        None => JudgeSource::Oracle,
    };
    let tasks: Vec<Task> = ctx.tasks.iter().map(|t| t.task.clone()).collect();
    let report = run_experiment(&tasks, &config, &harness, &judge)?;
    let (tsv, records) = report.write(&ctx.config.paths.output)?;
    Ok((report, tsv, records))
}
