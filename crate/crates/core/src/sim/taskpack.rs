//! Simulator tasks and the procedurally generated task pack.
//!
//! Three families: filling a form, changing a setting that can be reached
//! two different ways, and bulk-editing registry rows through the code agent
//! before saving in the GUI. Each task carries scripted solutions and
//! scripted near-misses that are checked to fail.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{cell_center, run_registry_script, step, SimState, Widget, CELL_COUNT, GRID_COLUMNS};
use crate::trajectory::{Action, ActionKind, Point, Task};

pub const PACK_VERSION: u32 = 1;
pub const DEFAULT_PACK_SEED: u64 = 20_251_016;
pub const TASKS_PER_FAMILY: usize = 60;
pub const SIM_STEP_BUDGET: u32 = 30;

/// The pack shipped with the crate, identical to `generate_pack(DEFAULT_PACK_SEED, TASKS_PER_FAMILY)`.
pub const BUNDLED_PACK: &str = include_str!("../../assets/simpack.v1.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FormFill,
    MultiPath,
    BulkEdit,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::FormFill, Family::MultiPath, Family::BulkEdit];

    pub fn tag(self) -> &'static str {
        match self {
            Family::FormFill => "form_fill",
            Family::MultiPath => "multi_path",
            Family::BulkEdit => "bulk_edit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub key: String,
    pub value: String,
}

impl Condition {
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Self {
        Condition {
            key: key.into(),
            value: value.into(),
        }
    }
}

/// GUI actions plus the bash blocks the code agent emits when the script
/// reaches a `CodeCall`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub code: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    pub task: Task,
    pub family: Family,
    pub initial: SimState,
    /// Alternatives; the task is solved when every condition of any one
    /// alternative holds.
    pub goals: Vec<Vec<Condition>>,
    pub solutions: Vec<Script>,
    pub distractors: Vec<Script>,
}

impl SimTask {
    pub fn is_solved(&self, state: &SimState) -> bool {
        self.goals
            .iter()
            .any(|alt| alt.iter().all(|c| state.value(&c.key).as_deref() == Some(c.value.as_str())))
    }

    pub fn goal_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.goals.iter().flatten().map(|c| c.key.as_str()).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.task.violations();
        if self.goals.is_empty() || self.goals.iter().any(Vec::is_empty) {
            out.push(format!("{}: empty goal", self.task.id));
        }
        for c in self.goals.iter().flatten() {
            match self.initial.value(&c.key) {
                None => out.push(format!("{}: goal key {} does not exist", self.task.id, c.key)),
                Some(v) if v == c.value => {
                    out.push(format!("{}: goal key {} already holds its goal value", self.task.id, c.key))
                }
                _ => {}
            }
        }
        for (i, s) in self.solutions.iter().enumerate() {
            if !self.is_solved(&run_script(&self.initial, s)) {
                out.push(format!("{}: solution {i} does not solve the task", self.task.id));
            }
        }
        for (i, s) in self.distractors.iter().enumerate() {
            if self.is_solved(&run_script(&self.initial, s)) {
                out.push(format!("{}: distractor {i} solves the task", self.task.id));
            }
        }
        out
    }
}

/// Final state after running a script, code blocks included.
pub fn run_script(initial: &SimState, script: &Script) -> SimState {
    let mut state = initial.clone();
    for a in &script.actions {
        if a.kind == ActionKind::CodeCall {
            for block in &script.code {
                run_registry_script(&mut state, block);
            }
        }
        state = step(&state, a);
    }
    state
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPack {
    pub version: u32,
    pub seed: u64,
    pub tasks: Vec<SimTask>,
}

#[derive(Debug, Error)]
pub enum PackError {
    #[error("task pack {path}: {message}")]
    Io { path: String, message: String },
    #[error("task pack: {0}")]
    Parse(String),
    #[error("task pack version {0} is not supported")]
    Version(u32),
    #[error("task pack is inconsistent: {0}")]
    Invalid(String),
}

impl TaskPack {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_PACK).expect("bundled task pack is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PackError> {
        let pack: TaskPack = serde_json::from_str(text).map_err(|e| PackError::Parse(e.to_string()))?;
        if pack.version != PACK_VERSION {
            return Err(PackError::Version(pack.version));
        }
        let problems: Vec<String> = pack.tasks.iter().flat_map(SimTask::violations).collect();
        if !problems.is_empty() {
            return Err(PackError::Invalid(problems.join("; ")));
        }
        Ok(pack)
    }

    pub fn load(path: &Path) -> Result<Self, PackError> {
        let text = std::fs::read_to_string(path).map_err(|e| PackError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pack serializes");
        s.push('\n');
        s
    }

    pub fn family(&self, family: Family) -> impl Iterator<Item = &SimTask> {
        self.tasks.iter().filter(move |t| t.family == family)
    }

    pub fn get(&self, task_id: &str) -> Option<&SimTask> {
        self.tasks.iter().find(|t| t.task.id == task_id)
    }
}

pub fn generate_pack(seed: u64, per_family: usize) -> TaskPack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(per_family * 3);
    for family in Family::ALL {
        for i in 0..per_family {
            let id = format!("{}-{:03}", family.tag(), i + 1);
            let t = match family {
                Family::FormFill => form_fill(&id, &mut rng),
                Family::MultiPath => multi_path(&id, &mut rng),
                Family::BulkEdit => bulk_edit(&id, &mut rng),
            };
            tasks.push(t);
        }
    }
    TaskPack {
        version: PACK_VERSION,
        seed,
        tasks,
    }
}

const NAMES: [&str; 10] = ["Ada", "Linus", "Grace", "Alan", "Ken", "Ruth", "Edsger", "Hedy", "Niklaus", "Frances"];
const CITIES: [&str; 8] = ["Oslo", "Lima", "Kyoto", "Quito", "Perth", "Accra", "Tartu", "Porto"];
const DECOY_TOGGLES: [&str; 5] = ["Animations", "Sounds", "Beta features", "Telemetry", "Tooltips"];

fn click_cell(cell: u8) -> Action {
    let (x, y) = cell_center(cell);
    Action::click(x, y)
}

fn drag_cells(from: u8, to: u8) -> Action {
    let (a, b) = (cell_center(from), cell_center(to));
    Action::drag_to(Point::new(a.0, a.1), Point::new(b.0, b.1))
}

fn slug(label: &str) -> String {
    label.to_ascii_lowercase().replace(' ', "_")
}

fn position(cell: u8) -> String {
    format!("row {}, column {}", cell / GRID_COLUMNS + 1, cell % GRID_COLUMNS + 1)
}

fn shuffled_cells(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut cells: Vec<u8> = (0..CELL_COUNT).collect();
    cells.shuffle(rng);
    cells
}

fn script(actions: Vec<Action>) -> Script {
    Script { actions, code: Vec::new() }
}

/// Keeps the candidates that really fail; falls back to giving up at once.
fn failing(initial: &SimState, goals: &[Vec<Condition>], candidates: Vec<Script>) -> Vec<Script> {
    let probe = SimTask {
        task: Task::new("probe", "probe", 1, "probe"),
        family: Family::FormFill,
        initial: initial.clone(),
        goals: goals.to_vec(),
        solutions: Vec::new(),
        distractors: Vec::new(),
    };
    let mut out: Vec<Script> = candidates
        .into_iter()
        .filter(|s| !probe.is_solved(&run_script(initial, s)))
        .collect();
    if out.is_empty() {
        out.push(script(vec![Action::fail()]));
    }
    out
}

fn form_fill(id: &str, rng: &mut ChaCha8Rng) -> SimTask {
    let forms = ["Contact", "Signup", "Shipping", "Profile", "Booking"];
    let form = *forms.choose(rng).expect("non-empty");
    let prefix = slug(form);
    let name = *NAMES.choose(rng).expect("non-empty");
    let all_fields = [
        ("name", "Name", name.to_string()),
        ("email", "Email", format!("{}@ex.io", name.to_ascii_lowercase())),
        ("city", "City", CITIES.choose(rng).expect("non-empty").to_string()),
        ("phone", "Phone", format!("555-{:04}", rng.random_range(0..10_000u32))),
    ];
    let n_fields = rng.random_range(2..=3usize);
    let mut order: Vec<usize> = (0..all_fields.len()).collect();
    order.shuffle(rng);
    let chosen: Vec<usize> = order[..n_fields].to_vec();
    let decoy_field = order[n_fields];
    let with_drag = rng.random_bool(1.0 / 3.0);

    let mut cells = shuffled_cells(rng).into_iter();
    let mut state = SimState::default();
    let mut goal = Vec::new();
    let mut actions = Vec::new();
    let mut fill_steps = Vec::new();
    let mut field_cells = Vec::new();
    for &i in &chosen {
        let (k, label, value) = &all_fields[i];
        let key = format!("{prefix}.{k}");
        let cell = cells.next().expect("enough cells");
        state.cells.insert(cell, Widget::field(&key, label, ""));
        goal.push(Condition::new(&key, value));
        fill_steps.push(format!("set {label} to \"{value}\""));
        field_cells.push((cell, value.clone()));
        actions.push(click_cell(cell));
        actions.push(Action::type_text(value));
    }
    let (dk, dlabel, _) = &all_fields[decoy_field];
    let decoy_cell = cells.next().expect("enough cells");
    state.cells.insert(decoy_cell, Widget::field(&format!("{prefix}.{dk}"), dlabel, ""));
    let toggle_cell = cells.next().expect("enough cells");
    state
        .cells
        .insert(toggle_cell, Widget::toggle(&format!("{prefix}.newsletter"), "Newsletter", false));

    let mut drag = None;
    if with_drag {
        let from = cells.next().expect("enough cells");
        let to = cells.next().expect("enough cells");
        let key = format!("{prefix}.badge");
        state.cells.insert(from, Widget::draggable(&key, "Badge"));
        goal.push(Condition::new(&key, format!("c{to}")));
        fill_steps.push(format!("move the Badge tile to {}", position(to)));
        actions.push(drag_cells(from, to));
        drag = Some((from, to));
    }
    let submit = cells.next().expect("enough cells");
    let submit_key = format!("{prefix}.submit");
    state.cells.insert(submit, Widget::button(&submit_key, "Submit"));
    goal.push(Condition::new(&submit_key, "pressed"));
    actions.push(click_cell(submit));
    actions.push(Action::done());

    let instruction = format!("In the {form} form, {}, then press Submit.", fill_steps.join(", "));
    let goals = vec![goal];

    let mut near = Vec::new();
    // Submit never pressed.
    let mut no_submit = actions.clone();
    no_submit.remove(no_submit.len() - 2);
    near.push(script(no_submit));
    // Last character of the first value missing.
    let mut typo = actions.clone();
    let short: String = {
        let v = &field_cells[0].1;
        v[..v.len() - 1].to_string()
    };
    typo[1] = Action::type_text(&short);
    near.push(script(typo));
    // First value typed into the decoy field.
    let mut wrong_field = actions.clone();
    wrong_field[0] = click_cell(decoy_cell);
    near.push(script(wrong_field));
    if let Some((from, to)) = drag {
        let mut wrong_drop = actions.clone();
        let spare = cells.next().expect("enough cells");
        let idx = wrong_drop
            .iter()
            .position(|a| a.kind == ActionKind::DragTo)
            .expect("drag present");
        wrong_drop[idx] = drag_cells(from, spare);
        near.push(script(wrong_drop));
        let _ = to;
    }
    let mut gave_up = actions[..2].to_vec();
    gave_up.push(Action::fail());
    near.push(script(gave_up));

    SimTask {
        task: Task::new(id, instruction, SIM_STEP_BUDGET, Family::FormFill.tag()),
        family: Family::FormFill,
        distractors: failing(&state, &goals, near),
        solutions: vec![script(actions)],
        initial: state,
        goals,
    }
}

fn multi_path(id: &str, rng: &mut ChaCha8Rng) -> SimTask {
    let settings = [
        ("dark_mode", "Dark mode", "theme", "Theme", "light", "dark"),
        ("autosave", "Autosave", "save_every", "Save every", "never", "5m"),
        ("mute", "Mute", "volume", "Volume", "70", "0"),
        ("offline", "Offline mode", "sync", "Sync", "auto", "off"),
        ("large_text", "Large text", "font_size", "Font size", "12", "18"),
        ("compact", "Compact view", "density", "Density", "normal", "compact"),
    ];
    let (tk, tlabel, fk, flabel, initial_value, goal_value) = *settings.choose(rng).expect("non-empty");
    let apps = ["Editor", "Mail", "Player", "Notes", "Viewer"];
    let app = *apps.choose(rng).expect("non-empty");
    let prefix = slug(app);
    let mut cells = shuffled_cells(rng).into_iter();
    let mut state = SimState::default();
    let toggle_key = format!("{prefix}.{tk}");
    let field_key = format!("{prefix}.{fk}");
    let apply_key = format!("{prefix}.apply");
    let (toggle_cell, field_cell, apply_cell) = (
        cells.next().expect("cell"),
        cells.next().expect("cell"),
        cells.next().expect("cell"),
    );
    state.cells.insert(toggle_cell, Widget::toggle(&toggle_key, tlabel, false));
    state.cells.insert(field_cell, Widget::field(&field_key, flabel, initial_value));
    state.cells.insert(apply_cell, Widget::button(&apply_key, "Apply"));
    let n_decoys = rng.random_range(1..=3usize);
    let decoys: Vec<&str> = DECOY_TOGGLES.choose_multiple(rng, n_decoys).copied().collect();
    let mut decoy_cells = Vec::new();
    for d in decoys {
        let c = cells.next().expect("cell");
        state.cells.insert(c, Widget::toggle(&format!("{prefix}.{}", slug(d)), d, false));
        decoy_cells.push(c);
    }
    let goals = vec![
        vec![Condition::new(&toggle_key, "on"), Condition::new(&apply_key, "pressed")],
        vec![Condition::new(&field_key, goal_value), Condition::new(&apply_key, "pressed")],
    ];
    let instruction = format!(
        "In {app} settings, switch on {} (either the {tlabel} toggle or setting {flabel} to \"{goal_value}\" works) and press Apply.",
        tlabel.to_ascii_lowercase()
    );
    let via_toggle = vec![click_cell(toggle_cell), click_cell(apply_cell), Action::done()];
    let via_field = vec![
        click_cell(field_cell),
        Action::hotkey("ctrl+backspace"),
        Action::type_text(goal_value),
        click_cell(apply_cell),
        Action::done(),
    ];
    let near = vec![
        // Toggled twice, back to off.
        script(vec![
            click_cell(toggle_cell),
            click_cell(toggle_cell),
            click_cell(apply_cell),
            Action::done(),
        ]),
        // Value appended instead of replaced.
        script(vec![
            click_cell(field_cell),
            Action::type_text(goal_value),
            click_cell(apply_cell),
            Action::done(),
        ]),
        // Wrong toggle.
        script(vec![click_cell(decoy_cells[0]), click_cell(apply_cell), Action::done()]),
        // Never applied.
        script(vec![click_cell(toggle_cell), Action::done()]),
    ];
    SimTask {
        task: Task::new(id, instruction, SIM_STEP_BUDGET, Family::MultiPath.tag()),
        family: Family::MultiPath,
        distractors: failing(&state, &goals, near),
        solutions: vec![script(via_toggle), script(via_field)],
        initial: state,
        goals,
    }
}

fn bulk_edit(id: &str, rng: &mut ChaCha8Rng) -> SimTask {
    let rows = rng.random_range(4..=8usize);
    let owners: Vec<&str> = NAMES.choose_multiple(rng, 3).copied().collect();
    let target = owners[0];
    let n_target = rng.random_range(1..=3usize.min(rows - 1));
    let mut row_owners: Vec<&str> = (0..rows)
        .map(|i| if i < n_target { target } else { owners[1 + i % 2] })
        .collect();
    row_owners.shuffle(rng);
    let mut state = SimState::default();
    let mut target_rows = Vec::new();
    for (i, owner) in row_owners.iter().enumerate() {
        let r = i + 1;
        state.registry.insert(format!("sheet.r{r}.owner"), owner.to_ascii_lowercase());
        state.registry.insert(format!("sheet.r{r}.status"), "todo".to_string());
        if *owner == target {
            target_rows.push(r);
        }
    }
    let other_row = (1..=rows).find(|r| !target_rows.contains(r)).expect("another owner exists");
    let mut cells = shuffled_cells(rng).into_iter();
    let save_cell = cells.next().expect("cell");
    let filter_cell = cells.next().expect("cell");
    state.cells.insert(save_cell, Widget::button("sheet.save", "Save sheet"));
    state.cells.insert(filter_cell, Widget::toggle("sheet.show_done", "Show done", false));

    let mut goal: Vec<Condition> = target_rows
        .iter()
        .map(|r| Condition::new(format!("sheet.r{r}.status"), "done"))
        .collect();
    goal.push(Condition::new("sheet.save", "pressed"));
    let goals = vec![goal];
    let who = target.to_ascii_lowercase();
    let instruction = format!(
        "In the sheet, mark every row owned by {who} as done, then press Save sheet. Rows live in the app registry (keys sheet.rN.owner and sheet.rN.status)."
    );
    let sets = |rs: &[usize]| -> String {
        rs.iter()
            .map(|r| format!("registry set sheet.r{r}.status done"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let subtask = format!("Set sheet.rN.status to done for every row whose owner is {who}.");
    let gui = |code: Vec<String>, save: bool, last: Action| -> Script {
        let mut actions = vec![Action::code_call(Some(&subtask))];
        if save {
            actions.push(click_cell(save_cell));
        }
        actions.push(last);
        Script { actions, code }
    };
    let solutions = vec![
        gui(vec!["registry list sheet.".to_string(), sets(&target_rows)], true, Action::done()),
        gui(vec![sets(&target_rows), "registry list sheet.".to_string()], true, Action::done()),
    ];
    let mut near = Vec::new();
    if target_rows.len() > 1 {
        near.push(gui(
            vec!["registry list sheet.".to_string(), sets(&target_rows[..target_rows.len() - 1])],
            true,
            Action::done(),
        ));
    }
    near.push(gui(vec![sets(&[other_row])], true, Action::done()));
    near.push(gui(vec![sets(&target_rows)], false, Action::done()));
    near.push(gui(
        vec![format!("python3 -c 'print(1)'\n{}", sets(&target_rows))],
        true,
        Action::done(),
    ));
    near.push(gui(vec!["registry list sheet.".to_string()], false, Action::fail()));
    SimTask {
        task: Task::new(id, instruction, SIM_STEP_BUDGET, Family::BulkEdit.tag()),
        family: Family::BulkEdit,
        distractors: failing(&state, &goals, near),
        solutions,
        initial: state,
        goals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_pack_matches_generator() {
        let generated = generate_pack(DEFAULT_PACK_SEED, TASKS_PER_FAMILY);
        if std::env::var_os("BLESS_GOLDENS").is_some() {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/simpack.v1.json");
            std::fs::write(path, generated.to_json()).unwrap();
            return;
        }
        assert_eq!(TaskPack::bundled(), generated);
    }

    #[test]
    fn generated_tasks_are_consistent() {
        let pack = generate_pack(7, 20);
        assert_eq!(pack.tasks.len(), 60);
        for t in &pack.tasks {
            assert_eq!(t.violations(), Vec::<String>::new());
            assert!(!t.solutions.is_empty());
            assert!(!t.distractors.is_empty());
        }
    }
}
