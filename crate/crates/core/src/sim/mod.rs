//! A small deterministic desktop.
//!
//! The screen is a 3x6 grid of widget cells on the left and a read-only
//! panel listing the app registry on the right. Rendering is a pure
//! function of [`SimState`]; every rendered frame is also recorded in a
//! shared [`StateLedger`] so test harnesses can map a screenshot digest back
//! to the state it shows.

pub mod facts;
pub mod judges;
pub mod scripted;
pub mod taskpack;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{CodeBlock, CodeExecutor, CodeLanguage, ExecFeedback, ExecStatus, ExecutorError};
use crate::ensemble::{Environment, EnvironmentFactory, RolloutError};
use crate::raster::{self, ImageDigest, Raster, Rect};
use crate::trajectory::{Action, ActionKind, Rollout, Screenshot, Task};

pub use taskpack::{Condition, Family, SimTask};

pub const SCREEN_WIDTH: u32 = 640;
pub const SCREEN_HEIGHT: u32 = 400;
pub const GRID_COLUMNS: u8 = 3;
pub const GRID_ROWS: u8 = 6;
pub const CELL_COUNT: u8 = GRID_COLUMNS * GRID_ROWS;
const GRID_ORIGIN: (u32, u32) = (8, 32);
const CELL_SIZE: (u32, u32) = (124, 52);
const CELL_PITCH: (u32, u32) = (128, 60);
const PANEL_X: u32 = 400;
const PANEL_LINE: u32 = 10;

const BACKGROUND: Rgb<u8> = Rgb([236, 236, 236]);
const INK: Rgb<u8> = Rgb([20, 20, 20]);
const FOCUS: Rgb<u8> = Rgb([30, 90, 220]);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum WidgetValue {
    Toggle(bool),
    Field(String),
    Button(bool),
    Draggable,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Widget {
    pub key: String,
    pub label: String,
    #[serde(flatten)]
    pub value: WidgetValue,
}

impl Widget {
    pub fn toggle(key: &str, label: &str, on: bool) -> Self {
        Widget {
            key: key.into(),
            label: label.into(),
            value: WidgetValue::Toggle(on),
        }
    }

    pub fn field(key: &str, label: &str, text: &str) -> Self {
        Widget {
            key: key.into(),
            label: label.into(),
            value: WidgetValue::Field(text.into()),
        }
    }

    pub fn button(key: &str, label: &str) -> Self {
        Widget {
            key: key.into(),
            label: label.into(),
            value: WidgetValue::Button(false),
        }
    }

    pub fn draggable(key: &str, label: &str) -> Self {
        Widget {
            key: key.into(),
            label: label.into(),
            value: WidgetValue::Draggable,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimState {
    pub cells: BTreeMap<u8, Widget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<u8>,
    #[serde(default)]
    pub registry: BTreeMap<String, String>,
}

impl SimState {
    /// Observable value of a widget key or registry key. Toggles read
    /// `on`/`off`, buttons `idle`/`pressed`, draggables the id of the cell
    /// they sit in (`c7`).
    pub fn value(&self, key: &str) -> Option<String> {
        for (cell, w) in &self.cells {
            if w.key == key {
                return Some(match &w.value {
                    WidgetValue::Toggle(on) => if *on { "on" } else { "off" }.to_string(),
                    WidgetValue::Field(text) => text.clone(),
                    WidgetValue::Button(pressed) => if *pressed { "pressed" } else { "idle" }.to_string(),
                    WidgetValue::Draggable => format!("c{cell}"),
                });
            }
        }
        self.registry.get(key).cloned()
    }

    /// Every observable key with its value, widgets first in cell order.
    pub fn observables(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .cells
            .values()
            .map(|w| (w.key.clone(), self.value(&w.key).unwrap_or_default()))
            .collect();
        out.extend(self.registry.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    pub fn focused_widget(&self) -> Option<&Widget> {
        self.focus.and_then(|c| self.cells.get(&c))
    }

    pub fn snapshot(&self) -> SimState {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &SimState) {
        *self = snapshot.clone();
    }
}

pub fn cell_rect(cell: u8) -> Rect {
    let (col, row) = ((cell % GRID_COLUMNS) as u32, (cell / GRID_COLUMNS) as u32);
    Rect::new(
        GRID_ORIGIN.0 + col * CELL_PITCH.0,
        GRID_ORIGIN.1 + row * CELL_PITCH.1,
        CELL_SIZE.0,
        CELL_SIZE.1,
    )
}

pub fn cell_center(cell: u8) -> (u32, u32) {
    cell_rect(cell).center()
}

pub fn cell_at(x: u32, y: u32) -> Option<u8> {
    (0..CELL_COUNT).find(|&c| cell_rect(c).contains(x, y))
}

fn fit(text: &str, width: u32) -> String {
    text.chars().take((width / raster::GLYPH) as usize).collect()
}

fn draw_widget(img: &mut RgbImage, cell: u8, w: &Widget, focused: bool) {
    let r = cell_rect(cell);
    let (fill, value_text) = match &w.value {
        WidgetValue::Toggle(true) => (Rgb([170, 225, 170]), "ON".to_string()),
        WidgetValue::Toggle(false) => (Rgb([205, 205, 205]), "OFF".to_string()),
        WidgetValue::Field(_) => (Rgb([250, 250, 250]), String::new()),
        WidgetValue::Button(false) => (Rgb([190, 205, 235]), "[ idle ]".to_string()),
        WidgetValue::Button(true) => (Rgb([110, 130, 190]), "[pressed]".to_string()),
        WidgetValue::Draggable => (Rgb([245, 190, 120]), "::".to_string()),
    };
    raster::fill_rect(img, r, fill);
    raster::stroke_rect(img, r, 1, Rgb([120, 120, 120]));
    raster::draw_text(img, r.x as i64 + 4, r.y as i64 + 6, &fit(&w.label, r.width - 8), INK);
    if let WidgetValue::Field(text) = &w.value {
        let bx = Rect::new(r.x + 4, r.y + 22, r.width - 8, 22);
        raster::stroke_rect(img, bx, 1, Rgb([90, 90, 90]));
        raster::draw_text(img, bx.x as i64 + 3, bx.y as i64 + 7, &fit(text, bx.width - 6), INK);
    } else {
        raster::draw_text(img, r.x as i64 + 4, r.y as i64 + 30, &value_text, INK);
    }
    if focused {
        raster::stroke_rect(img, r, 3, FOCUS);
    }
}

/// Rasterizes `state`. An empty state renders as plain background.
pub fn render(state: &SimState) -> RgbImage {
    let mut img = raster::solid(SCREEN_WIDTH, SCREEN_HEIGHT, BACKGROUND);
    for (&cell, w) in &state.cells {
        draw_widget(&mut img, cell, w, state.focus == Some(cell));
    }
    let width = SCREEN_WIDTH - PANEL_X - 4;
    for (i, (k, v)) in state.registry.iter().enumerate() {
        let line = fit(&format!("{k}={v}"), width);
        raster::draw_text(&mut img, PANEL_X as i64, 8 + (i as u32 * PANEL_LINE) as i64, &line, INK);
    }
    img
}

/// Applies one action. Misses and actions without widget semantics leave
/// the state unchanged.
pub fn step(state: &SimState, action: &Action) -> SimState {
    let mut next = state.clone();
    match action.kind {
        ActionKind::Click => {
            let Some(p) = action.pointer_start else { return next };
            let Some(cell) = cell_at(p.x, p.y) else { return next };
            let Some(w) = next.cells.get_mut(&cell) else { return next };
            match &mut w.value {
                WidgetValue::Toggle(on) => *on = !*on,
                WidgetValue::Field(_) => next.focus = Some(cell),
                WidgetValue::Button(pressed) => *pressed = true,
                WidgetValue::Draggable => {}
            }
        }
        ActionKind::DragTo => {
            let (Some(a), Some(b)) = (action.pointer_start, action.pointer_end) else { return next };
            let (Some(from), Some(to)) = (cell_at(a.x, a.y), cell_at(b.x, b.y)) else { return next };
            let movable = matches!(next.cells.get(&from), Some(w) if w.value == WidgetValue::Draggable);
            if movable && !next.cells.contains_key(&to) {
                let w = next.cells.remove(&from).expect("checked");
                next.cells.insert(to, w);
                if next.focus == Some(from) {
                    next.focus = None;
                }
            }
        }
        ActionKind::TypeText => {
            let text = action.text.as_deref().unwrap_or_default();
            if let Some(cell) = next.focus {
                if let Some(Widget {
                    value: WidgetValue::Field(current),
                    ..
                }) = next.cells.get_mut(&cell)
                {
                    current.push_str(text);
                }
            }
        }
        ActionKind::Hotkey => {
            let combo = action.text.as_deref().unwrap_or_default();
            if combo == "ctrl+backspace" || combo == "ctrl+u" {
                if let Some(cell) = next.focus {
                    if let Some(Widget {
                        value: WidgetValue::Field(current),
                        ..
                    }) = next.cells.get_mut(&cell)
                    {
                        current.clear();
                    }
                }
            } else if combo == "escape" {
                next.focus = None;
            }
        }
        _ => {}
    }
    next
}

/// Executes a registry script: one command per line, `#` comments allowed.
///
/// ```text
/// registry list [PREFIX]     print matching KEY=VALUE lines
/// registry get KEY           print the value
/// registry set KEY VALUE     overwrite an existing key
/// echo TEXT                  print TEXT
/// ```
///
/// Execution stops at the first failing line.
pub fn run_registry_script(state: &mut SimState, script: &str) -> (i32, String, String) {
    let mut out = String::new();
    for (n, raw) in script.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let words: Vec<String> = line
            .split_whitespace()
            .map(|w| w.trim_matches(|c| c == '"' || c == '\'').to_string())
            .collect();
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        match words.as_slice() {
            ["echo", rest @ ..] => {
                out.push_str(&rest.join(" "));
                out.push('\n');
            }
            ["registry", "list"] | ["registry", "list", _] => {
                let prefix = words.get(2).copied().unwrap_or("");
                for (k, v) in state.registry.iter().filter(|(k, _)| k.starts_with(prefix)) {
                    out.push_str(&format!("{k}={v}\n"));
                }
            }
            ["registry", "get", key] => match state.registry.get(*key) {
                Some(v) => {
                    out.push_str(v);
                    out.push('\n');
                }
                None => return (1, out, format!("line {}: registry: no such key: {key}\n", n + 1)),
            },
            ["registry", "set", key, value] => match state.registry.get_mut(*key) {
                Some(v) => *v = value.to_string(),
                None => return (1, out, format!("line {}: registry: no such key: {key}\n", n + 1)),
            },
            ["registry", ..] => {
                return (2, out, format!("line {}: registry: usage: registry list|get|set\n", n + 1))
            }
            [cmd, ..] => return (127, out, format!("line {}: {cmd}: command not found\n", n + 1)),
            [] => {}
        }
    }
    (0, out, String::new())
}

/// Remembers which state produced each rendered frame.
#[derive(Debug, Default)]
pub struct StateLedger {
    states: Mutex<HashMap<ImageDigest, Arc<SimState>>>,
}

impl StateLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(StateLedger::default())
    }

    pub fn record(&self, digest: ImageDigest, state: &SimState) {
        self.states
            .lock()
            .unwrap()
            .entry(digest)
            .or_insert_with(|| Arc::new(state.clone()));
    }

    pub fn get(&self, digest: &ImageDigest) -> Option<Arc<SimState>> {
        self.states.lock().unwrap().get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.states.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Milliseconds the logical clock advances per action.
pub const TICK_MS: u64 = 1000;

/// One environment instance. Screenshots use a logical clock, so reruns are
/// byte-identical.
pub struct SimEnv {
    initial: SimState,
    state: SimState,
    ledger: Arc<StateLedger>,
    steps: u64,
    /// Last rendered state and its frame, reused while nothing changes.
    frame: Option<(SimState, Arc<Raster>)>,
}

impl SimEnv {
    pub fn new(initial: SimState, ledger: Arc<StateLedger>) -> Self {
        SimEnv {
            state: initial.clone(),
            initial,
            ledger,
            steps: 0,
            frame: None,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn screenshot(&mut self) -> Screenshot {
        let image = match &self.frame {
            Some((rendered, image)) if *rendered == self.state => image.clone(),
            _ => {
                let image = Arc::new(Raster::new(render(&self.state)));
                self.ledger.record(image.digest(), &self.state);
                self.frame = Some((self.state.clone(), image.clone()));
                image
            }
        };
        Screenshot {
            image,
            captured_at_ms: self.steps * TICK_MS,
            delay_after_action_ms: 0,
        }
    }

    pub fn apply(&mut self, action: &Action) -> Screenshot {
        self.state = step(&self.state, action);
        self.steps += 1;
        self.screenshot()
    }
}

impl CodeExecutor for SimEnv {
    fn run(&mut self, block: &CodeBlock, step_index: u32) -> Result<ExecFeedback, ExecutorError> {
        let (return_code, stdout, stderr) = match block.language {
            CodeLanguage::Bash => run_registry_script(&mut self.state, &block.code),
            CodeLanguage::Python => (127, String::new(), "python: not available on this desktop\n".to_string()),
        };
        Ok(ExecFeedback {
            status: if return_code == 0 { ExecStatus::Ok } else { ExecStatus::Error },
            return_code,
            stdout,
            stderr,
            step_index,
        })
    }
}

impl Environment for SimEnv {
    fn reset(&mut self) -> Result<Screenshot, RolloutError> {
        self.state = self.initial.clone();
        self.steps = 0;
        Ok(self.screenshot())
    }

    fn step(&mut self, action: &Action) -> Result<Screenshot, RolloutError> {
        Ok(self.apply(action))
    }

    fn code_executor(&mut self) -> &mut dyn CodeExecutor {
        self
    }
}

/// Builds environments for the tasks of a pack, all sharing one ledger.
pub struct SimFactory {
    tasks: HashMap<String, SimTask>,
    pub ledger: Arc<StateLedger>,
}

impl SimFactory {
    pub fn new(tasks: &[SimTask], ledger: Arc<StateLedger>) -> Self {
        SimFactory {
            tasks: tasks.iter().map(|t| (t.task.id.clone(), t.clone())).collect(),
            ledger,
        }
    }
}

impl EnvironmentFactory for SimFactory {
    fn create(&self, task: &Task, _seed: u64) -> Result<Box<dyn Environment>, RolloutError> {
        let sim = self
            .tasks
            .get(&task.id)
            .ok_or_else(|| RolloutError::Env(format!("unknown sim task {:?}", task.id)))?;
        Ok(Box::new(SimEnv::new(sim.initial.clone(), self.ledger.clone())))
    }
}

/// 1 when any goal alternative holds in `state`.
pub fn oracle_reward(task: &SimTask, state: &SimState) -> u8 {
    u8::from(task.is_solved(state))
}

/// Everything needed to run scripted agents on a set of sim tasks, sharing
/// one ledger.
pub struct SimRig {
    pub tasks: Vec<SimTask>,
    pub ledger: Arc<StateLedger>,
    pub environments: SimFactory,
    pub policies: scripted::ScriptedPolicyFactory,
    by_id: HashMap<String, usize>,
}

impl SimRig {
    pub fn new(tasks: &[SimTask], profiles: &[scripted::ScriptedProfile]) -> Self {
        let ledger = StateLedger::new();
        SimRig {
            tasks: tasks.to_vec(),
            environments: SimFactory::new(tasks, ledger.clone()),
            policies: scripted::ScriptedPolicyFactory::new(tasks, profiles, crate::prompts::PromptSet::builtin()),
            by_id: tasks.iter().enumerate().map(|(i, t)| (t.task.id.clone(), i)).collect(),
            ledger,
        }
    }

    pub fn task_list(&self) -> Vec<Task> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    pub fn sim_task(&self, task_id: &str) -> Option<&SimTask> {
        self.by_id.get(task_id).map(|&i| &self.tasks[i])
    }

    /// Reward of the state shown in the rollout's final frame; 0 for frames
    /// the simulator never rendered.
    pub fn reward(&self, task: &Task, rollout: &Rollout) -> u8 {
        let Some(sim) = self.sim_task(&task.id) else { return 0 };
        self.ledger
            .get(&rollout.final_screenshot().image.digest())
            .map_or(0, |state| oracle_reward(sim, &state))
    }

    pub fn facts(&self) -> facts::RuleFactGenerator {
        facts::RuleFactGenerator::new(self.ledger.clone(), &self.tasks)
    }

    pub fn captioner(&self) -> facts::RuleCaptioner {
        facts::RuleCaptioner::new(self.ledger.clone())
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("rollout belongs to task {found:?}, not {expected:?}")]
    WrongTask { found: String, expected: String },
    #[error("frame {frame} does not match the simulator (expected digest {expected})")]
    Diverged { frame: usize, expected: ImageDigest },
}

/// Re-executes a stored rollout, including the code recorded in its code
/// session reports, recording every frame in `ledger`. Returns the final
/// state. Fails if any reproduced frame differs from the stored one.
pub fn replay(task: &SimTask, rollout: &Rollout, ledger: Arc<StateLedger>) -> Result<SimState, ReplayError> {
    if rollout.task_id != task.task.id {
        return Err(ReplayError::WrongTask {
            found: rollout.task_id.clone(),
            expected: task.task.id.clone(),
        });
    }
    let mut env = SimEnv::new(task.initial.clone(), ledger);
    let check = |frame: usize, shot: &Screenshot, stored: &Screenshot| {
        if shot.image.digest() == stored.image.digest() {
            Ok(())
        } else {
            Err(ReplayError::Diverged {
                frame,
                expected: stored.image.digest(),
            })
        }
    };
    let first = env.screenshot();
    check(0, &first, &rollout.initial_screenshot)?;
    for (i, s) in rollout.steps.iter().enumerate() {
        if let Some(report) = &s.code_report {
            for code in &report.history {
                let _ = env.run(&code.block, code.feedback.step_index);
            }
        }
        let shot = env.apply(&s.action);
        check(i + 1, &shot, &s.screenshot)?;
    }
    Ok(env.state.clone())
}
