//! Tasks, actions, screenshots and rollouts, plus the on-disk rollout format.
//!
//! A rollout directory holds a `manifest.json` and one lossless PNG per frame:
//! `step_0000.png` is the initial screenshot and `step_{i+1:04}.png` is the
//! screenshot captured after action `i`. Actions are 0-based and each one is
//! paired with the screenshot taken after it executed, so transition `i` is
//! `(s_i, a_i, s_{i+1})`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::CodeSessionReport;
use crate::raster::Raster;

/// Version written into every manifest. Loading rejects anything else.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Post-action settle delay recorded for live UIs.
pub const LIVE_SETTLE_DELAY_MS: u64 = 3000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub instruction: String,
    pub step_budget: u32,
    pub domain_tag: String,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        step_budget: u32,
        domain_tag: impl Into<String>,
    ) -> Self {
        Task {
            id: id.into(),
            instruction: instruction.into(),
            step_budget,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.instruction.trim().is_empty() {
            out.push("task instruction is empty".to_string());
        }
        if self.step_budget == 0 {
            out.push("task step budget must be at least 1".to_string());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Click,
    MoveTo,
    DragTo,
    TypeText,
    Hotkey,
    Scroll,
    CodeCall,
    Done,
    Fail,
    Wait,
}

impl ActionKind {
    /// Pointer interactions get markers and zoom crops during augmentation.
    pub fn is_pointer(self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::MoveTo | ActionKind::DragTo)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::Done | ActionKind::Fail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }
}

/// One agent action.
///
/// `payload` is the raw action string exactly as the policy emitted it;
/// `text` carries the parsed argument for kinds that have one (typed text,
/// hotkey combination, code-call subtask, scroll amount).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_start: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_end: Option<Point>,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Action {
    fn bare(kind: ActionKind, payload: String) -> Self {
        Action {
            kind,
            pointer_start: None,
            pointer_end: None,
            payload,
            text: None,
        }
    }

    pub fn click(x: u32, y: u32) -> Self {
        Action {
            pointer_start: Some(Point::new(x, y)),
            ..Self::bare(ActionKind::Click, format!("agent.click({x}, {y})"))
        }
    }

    pub fn move_to(x: u32, y: u32) -> Self {
        Action {
            pointer_start: Some(Point::new(x, y)),
            ..Self::bare(ActionKind::MoveTo, format!("agent.move_to({x}, {y})"))
        }
    }

    pub fn drag_to(from: Point, to: Point) -> Self {
        Action {
            pointer_start: Some(from),
            pointer_end: Some(to),
            ..Self::bare(
                ActionKind::DragTo,
                format!("agent.drag_to({}, {}, {}, {})", from.x, from.y, to.x, to.y),
            )
        }
    }

    pub fn type_text(text: &str) -> Self {
        Action {
            text: Some(text.to_string()),
            ..Self::bare(ActionKind::TypeText, format!("agent.type({text:?})"))
        }
    }

    pub fn hotkey(combo: &str) -> Self {
        let keys: Vec<String> = combo.split('+').map(|k| format!("{k:?}")).collect();
        Action {
            text: Some(combo.to_string()),
            ..Self::bare(ActionKind::Hotkey, format!("agent.hotkey({})", keys.join(", ")))
        }
    }

    pub fn scroll(x: u32, y: u32, clicks: i32) -> Self {
        Action {
            pointer_start: Some(Point::new(x, y)),
            text: Some(clicks.to_string()),
            ..Self::bare(ActionKind::Scroll, format!("agent.scroll({x}, {y}, {clicks})"))
        }
    }

    /// Code-agent invocation; `None` hands over the full task instruction.
    pub fn code_call(subtask: Option<&str>) -> Self {
        let payload = match subtask {
            Some(s) => format!("agent.call_code_agent({s:?})"),
            None => "agent.call_code_agent()".to_string(),
        };
        Action {
            text: subtask.map(str::to_string),
            ..Self::bare(ActionKind::CodeCall, payload)
        }
    }

    pub fn wait(seconds: u32) -> Self {
        Action {
            text: Some(seconds.to_string()),
            ..Self::bare(ActionKind::Wait, format!("agent.wait({seconds})"))
        }
    }

    pub fn done() -> Self {
        Self::bare(ActionKind::Done, "agent.done()".to_string())
    }

    pub fn fail() -> Self {
        Self::bare(ActionKind::Fail, "agent.fail()".to_string())
    }

    /// A `Fail` carrying a diagnostic in place of the usual payload.
    pub fn fail_with(diagnostic: &str) -> Self {
        Action {
            text: Some(diagnostic.to_string()),
            ..Self::fail()
        }
    }

    /// Where the pointer ends up: the drop point for drags, the start point
    /// for every other pointer action.
    pub fn final_pointer(&self) -> Option<Point> {
        match self.kind {
            ActionKind::DragTo => self.pointer_end,
            k if k.is_pointer() => self.pointer_start,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Screenshot {
    pub image: Arc<Raster>,
    pub captured_at_ms: u64,
    pub delay_after_action_ms: u64,
}

impl Screenshot {
    pub fn new(image: RgbImage, captured_at_ms: u64, delay_after_action_ms: u64) -> Self {
        Screenshot {
            image: Arc::new(Raster::new(image)),
            captured_at_ms,
            delay_after_action_ms,
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width(), self.height())
    }

    /// Same pixels, new raster (digest recomputed on demand).
    pub fn with_image(&self, image: RgbImage) -> Self {
        Screenshot {
            image: Arc::new(Raster::new(image)),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub action: Action,
    pub screenshot: Screenshot,
    /// Present for `CodeCall` steps: the inner code session that ran.
    pub code_report: Option<CodeSessionReport>,
}

impl Step {
    pub fn new(action: Action, screenshot: Screenshot) -> Self {
        Step {
            action,
            screenshot,
            code_report: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalReason {
    AgentDone,
    AgentFail,
    BudgetExhausted,
    EnvError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub task_id: String,
    pub policy_id: String,
    pub sample_index: u32,
    pub seed: u64,
    pub initial_screenshot: Screenshot,
    pub steps: Vec<Step>,
    pub terminal_reason: TerminalReason,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_screenshot(&self) -> &Screenshot {
        self.steps
            .last()
            .map(|s| &s.screenshot)
            .unwrap_or(&self.initial_screenshot)
    }

    /// Screenshot `s_i` for `i` in `0..=T`.
    pub fn frame(&self, i: usize) -> Option<&Screenshot> {
        if i == 0 {
            Some(&self.initial_screenshot)
        } else {
            self.steps.get(i - 1).map(|s| &s.screenshot)
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &Screenshot> {
        std::iter::once(&self.initial_screenshot).chain(self.steps.iter().map(|s| &s.screenshot))
    }

    pub fn reference(&self) -> RolloutRef {
        RolloutRef {
            task_id: self.task_id.clone(),
            policy_id: self.policy_id.clone(),
            sample_index: self.sample_index,
            seed: self.seed,
        }
    }
}

/// Identity of a rollout, detached from its pixel data.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RolloutRef {
    pub task_id: String,
    pub policy_id: String,
    pub sample_index: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureCount {
    pub policy_id: String,
    pub count: u32,
}

/// The N rollouts entering selection. Judge answers are 1-based indices into
/// `rollouts`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub task_id: String,
    pub rollouts: Vec<Rollout>,
    pub mixture_plan: Vec<MixtureCount>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Resolves a 1-based judge answer.
    pub fn candidate(&self, k: usize) -> Option<&Rollout> {
        k.checked_sub(1).and_then(|i| self.rollouts.get(i))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rollouts.is_empty() {
            out.push("candidate set is empty".to_string());
        }
        let planned: u64 = self.mixture_plan.iter().map(|m| m.count as u64).sum();
        if planned != self.rollouts.len() as u64 {
            out.push(format!(
                "mixture plan counts sum to {planned} but {} rollouts are present",
                self.rollouts.len()
            ));
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            if r.task_id != self.task_id {
                out.push(format!(
                    "candidate {} belongs to task {:?}, expected {:?}",
                    i + 1,
                    r.task_id,
                    self.task_id
                ));
            }
        }
        out
    }
}

/// Borrowed `(s_i, a_i, s_{i+1})` triple.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    pub index: usize,
    pub before: &'a Screenshot,
    pub action: &'a Action,
    pub after: &'a Screenshot,
}

/// Exactly `T` chained transitions; triple `i`'s `after` is triple `i+1`'s `before`.
pub fn transitions(rollout: &Rollout) -> Vec<Transition<'_>> {
    let mut before = &rollout.initial_screenshot;
    rollout
        .steps
        .iter()
        .enumerate()
        .map(|(index, step)| {
            let t = Transition {
                index,
                before,
                action: &step.action,
                after: &step.screenshot,
            };
            before = &step.screenshot;
            t
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// 0-based step index, or `None` for rollout-level problems.
    pub step: Option<usize>,
    pub message: String,
}

impl Violation {
    fn rollout(message: impl Into<String>) -> Self {
        Violation {
            step: None,
            message: message.into(),
        }
    }

    fn step(step: usize, message: impl Into<String>) -> Self {
        Violation {
            step: Some(step),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.step {
            Some(i) => write!(f, "step {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn action_violations(action: &Action, bounds: (u32, u32)) -> Vec<String> {
    let mut out = Vec::new();
    let (start, end) = (action.pointer_start, action.pointer_end);
    match action.kind {
        ActionKind::Click | ActionKind::MoveTo if start.is_none() => {
            out.push(format!("{:?} requires pointer_start", action.kind));
        }
        ActionKind::DragTo if start.is_none() || end.is_none() => {
            out.push("DragTo requires pointer_start and pointer_end".to_string());
        }
        ActionKind::Done | ActionKind::Fail if start.is_some() || end.is_some() => {
            out.push(format!("{:?} must not carry coordinates", action.kind));
        }
        _ => {}
    }
    for p in [start, end].into_iter().flatten() {
        if p.x >= bounds.0 || p.y >= bounds.1 {
            out.push(format!(
                "coordinate ({}, {}) outside {}x{} screenshot",
                p.x, p.y, bounds.0, bounds.1
            ));
        }
    }
    out
}

/// Checks every rollout invariant against `task`. Violations are data; an
/// empty report means the rollout is valid.
pub fn validate_rollout(rollout: &Rollout, task: &Task) -> Vec<Violation> {
    let mut out: Vec<Violation> = task.violations().into_iter().map(Violation::rollout).collect();
    if rollout.task_id != task.id {
        out.push(Violation::rollout(format!(
            "rollout task id {:?} does not match task {:?}",
            rollout.task_id, task.id
        )));
    }
    let t = rollout.steps.len();
    if t == 0 {
        out.push(Violation::rollout("rollout has no steps"));
    }
    if t > task.step_budget as usize {
        out.push(Violation::rollout(format!(
            "budget violation: {t} steps exceed the step budget of {}",
            task.step_budget
        )));
    }
    let dims = rollout.initial_screenshot.dims();
    if dims.0 == 0 || dims.1 == 0 {
        out.push(Violation::rollout("initial screenshot has zero area"));
    }
    for tr in transitions(rollout) {
        if tr.after.dims() != dims {
            out.push(Violation::step(
                tr.index,
                format!(
                    "screenshot is {}x{}, expected {}x{}",
                    tr.after.width(),
                    tr.after.height(),
                    dims.0,
                    dims.1
                ),
            ));
        }
        for msg in action_violations(tr.action, tr.before.dims()) {
            out.push(Violation::step(tr.index, msg));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest {path} is invalid: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("manifest references missing image file {0}")]
    MissingImage(PathBuf),
    #[error("unsupported manifest schema version {found} (expected {MANIFEST_SCHEMA_VERSION})")]
    UnsupportedSchema { found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrajectoryError + '_ {
    move |source| TrajectoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    image: String,
    captured_at_ms: u64,
    delay_after_action_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    action: Action,
    #[serde(flatten)]
    frame: FrameRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code_report: Option<CodeSessionReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    task_id: String,
    policy_id: String,
    sample_index: u32,
    seed: u64,
    terminal_reason: TerminalReason,
    initial: FrameRecord,
    steps: Vec<StepRecord>,
}

pub fn frame_file_name(i: usize) -> String {
    format!("step_{i:04}.png")
}

/// Writes `rollout` into `directory` (created if needed) and returns the
/// manifest path.
pub fn save_rollout(rollout: &Rollout, directory: &Path) -> Result<PathBuf, TrajectoryError> {
    fs::create_dir_all(directory).map_err(io_err(directory))?;
    let write_frame = |i: usize, shot: &Screenshot| -> Result<FrameRecord, TrajectoryError> {
        let name = frame_file_name(i);
        let path = directory.join(&name);
        shot.image
            .image()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| TrajectoryError::Image {
                path: path.clone(),
                source,
            })?;
        Ok(FrameRecord {
            image: name,
            captured_at_ms: shot.captured_at_ms,
            delay_after_action_ms: shot.delay_after_action_ms,
        })
    };
    let initial = write_frame(0, &rollout.initial_screenshot)?;
    let steps = rollout
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            Ok(StepRecord {
                action: step.action.clone(),
                frame: write_frame(i + 1, &step.screenshot)?,
                code_report: step.code_report.clone(),
            })
        })
        .collect::<Result<Vec<_>, TrajectoryError>>()?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        task_id: rollout.task_id.clone(),
        policy_id: rollout.policy_id.clone(),
        sample_index: rollout.sample_index,
        seed: rollout.seed,
        terminal_reason: rollout.terminal_reason,
        initial,
        steps,
    };
    let path = directory.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a rollout from its directory or from the manifest path itself.
pub fn load_rollout(path: &Path) -> Result<Rollout, TrajectoryError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let directory = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TrajectoryError::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(TrajectoryError::UnsupportedSchema { found: v as u32 }),
        None => {
            return Err(TrajectoryError::Manifest {
                path: manifest_path.clone(),
                message: "missing schema_version".to_string(),
            })
        }
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| TrajectoryError::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    let read_frame = |rec: &FrameRecord| -> Result<Screenshot, TrajectoryError> {
        let file = directory.join(&rec.image);
        if !file.is_file() {
            return Err(TrajectoryError::MissingImage(file));
        }
        let img = image::open(&file)
            .map_err(|source| TrajectoryError::Image {
                path: file.clone(),
                source,
            })?
            .into_rgb8();
        Ok(Screenshot::new(img, rec.captured_at_ms, rec.delay_after_action_ms))
    };
    let initial_screenshot = read_frame(&manifest.initial)?;
    let steps = manifest
        .steps
        .iter()
        .map(|rec| {
            Ok(Step {
                action: rec.action.clone(),
                screenshot: read_frame(&rec.frame)?,
                code_report: rec.code_report.clone(),
            })
        })
        .collect::<Result<Vec<_>, TrajectoryError>>()?;
    Ok(Rollout {
        task_id: manifest.task_id,
        policy_id: manifest.policy_id,
        sample_index: manifest.sample_index,
        seed: manifest.seed,
        initial_screenshot,
        steps,
        terminal_reason: manifest.terminal_reason,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use image::Rgb;

    pub(crate) fn frame(w: u32, h: u32, shade: u8) -> Screenshot {
        let img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([shade, (x % 251) as u8, ((x + y) % 253) as u8])
        });
        Screenshot::new(img, shade as u64 * 10, 0)
    }

    pub(crate) fn rollout_with(actions: Vec<Action>, w: u32, h: u32) -> Rollout {
        let steps = actions
            .into_iter()
            .enumerate()
            .map(|(i, a)| Step::new(a, frame(w, h, i as u8 + 1)))
            .collect();
        Rollout {
            task_id: "t1".into(),
            policy_id: "p".into(),
            sample_index: 0,
            seed: 42,
            initial_screenshot: frame(w, h, 0),
            steps,
            terminal_reason: TerminalReason::AgentDone,
        }
    }

    fn task(budget: u32) -> Task {
        Task::new("t1", "do the thing", budget, "test")
    }

    #[test]
    fn valid_rollout_has_empty_report() {
        let r = rollout_with(
            vec![Action::click(5, 5), Action::type_text("x"), Action::done()],
            1920,
            1080,
        );
        assert!(validate_rollout(&r, &task(50)).is_empty());
    }

    #[test]
    fn click_without_pointer_is_reported_at_its_step() {
        let mut bad = Action::click(1, 1);
        bad.pointer_start = None;
        let r = rollout_with(vec![Action::wait(1), bad], 32, 32);
        let report = validate_rollout(&r, &task(50));
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].step, Some(1));
        assert!(report[0].message.contains("pointer_start"));
    }

    #[test]
    fn budget_overrun_is_reported() {
        let r = rollout_with(vec![Action::wait(0); 101], 4, 4);
        let report = validate_rollout(&r, &task(100));
        assert!(report
            .iter()
            .any(|v| v.step.is_none() && v.message.contains("budget violation")));
    }

    #[test]
    fn mismatched_dimensions_and_out_of_bounds_coordinates() {
        let mut r = rollout_with(vec![Action::click(40, 1), Action::done()], 32, 32);
        r.steps[1].screenshot = frame(16, 16, 9);
        let report = validate_rollout(&r, &task(10));
        assert!(report.iter().any(|v| v.step == Some(0) && v.message.contains("outside")));
        assert!(report.iter().any(|v| v.step == Some(1) && v.message.contains("16x16")));
    }

    #[test]
    fn done_with_coordinates_and_empty_rollout() {
        let mut done = Action::done();
        done.pointer_start = Some(Point::new(0, 0));
        let r = rollout_with(vec![done], 8, 8);
        assert_eq!(validate_rollout(&r, &task(5)).len(), 1);
        let empty = rollout_with(vec![], 8, 8);
        assert!(validate_rollout(&empty, &task(5))
            .iter()
            .any(|v| v.message.contains("no steps")));
    }

    #[test]
    fn transitions_chain_screenshots() {
        let r = rollout_with(
            vec![Action::click(1, 1), Action::wait(1), Action::type_text("a"), Action::done()],
            8,
            8,
        );
        let ts = transitions(&r);
        assert_eq!(ts.len(), 4);
        assert!(std::ptr::eq(ts[0].before, &r.initial_screenshot));
        for pair in ts.windows(2) {
            assert!(std::ptr::eq(pair[0].after, pair[1].before));
        }
        assert!(std::ptr::eq(ts[3].after, r.final_screenshot()));
    }

    #[test]
    fn save_writes_manifest_and_one_image_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let r = rollout_with(vec![Action::click(2, 3), Action::done()], 12, 9);
        let manifest = save_rollout(&r, dir.path()).unwrap();
        assert_eq!(manifest, dir.path().join(MANIFEST_FILE));
        let mut pngs: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".png"))
            .collect();
        pngs.sort();
        assert_eq!(pngs, vec!["step_0000.png", "step_0001.png", "step_0002.png"]);
        assert_eq!(load_rollout(dir.path()).unwrap(), r);
    }

    #[test]
    fn load_names_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let r = rollout_with(vec![Action::done()], 4, 4);
        save_rollout(&r, dir.path()).unwrap();
        fs::remove_file(dir.path().join("step_0001.png")).unwrap();
        match load_rollout(dir.path()) {
            Err(TrajectoryError::MissingImage(p)) => assert!(p.ends_with("step_0001.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let r = rollout_with(vec![Action::done()], 4, 4);
        let path = save_rollout(&r, dir.path()).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_rollout(&path),
            Err(TrajectoryError::UnsupportedSchema { found: 7 })
        ));
    }

    #[test]
    fn candidate_indexing_is_one_based() {
        let a = rollout_with(vec![Action::done()], 4, 4);
        let mut b = a.clone();
        b.sample_index = 1;
        let set = CandidateSet {
            task_id: "t1".into(),
            rollouts: vec![a.clone(), b.clone()],
            mixture_plan: vec![MixtureCount {
                policy_id: "p".into(),
                count: 2,
            }],
        };
        assert!(set.violations().is_empty());
        assert_eq!(set.candidate(1), Some(&a));
        assert_eq!(set.candidate(2), Some(&b));
        assert_eq!(set.candidate(0), None);
        assert_eq!(set.candidate(3), None);
    }
}
