#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use widescale::sim::taskpack::{SimTask, TaskPack};
use widescale::sim::{cell_center, SimEnv, StateLedger, CELL_COUNT, SCREEN_HEIGHT, SCREEN_WIDTH};
use widescale::trajectory::{Action, Point, Rollout, Step, TerminalReason};

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let cell = |rng: &mut ChaCha8Rng| cell_center(rng.random_range(0..CELL_COUNT));
    match rng.random_range(0..8u8) {
        0 | 1 => {
            let (x, y) = cell(rng);
            Action::click(x, y)
        }
        2 => Action::move_to(rng.random_range(0..SCREEN_WIDTH), rng.random_range(0..SCREEN_HEIGHT)),
        3 => {
            let (a, b) = (cell(rng), cell(rng));
            Action::drag_to(Point::new(a.0, a.1), Point::new(b.0, b.1))
        }
        4 => Action::type_text(["ada", "42", "x y", ""].choose(rng).unwrap()),
        5 => Action::hotkey(["ctrl+u", "escape", "ctrl+s"].choose(rng).unwrap()),
        6 => Action::scroll(SCREEN_WIDTH / 2, SCREEN_HEIGHT / 2, if rng.random_bool(0.5) { 3 } else { -3 }),
        _ => Action::wait(1),
    }
}

/// A valid rollout of `1..=max_len` random actions on a random pack task,
/// rendered by the simulator so every frame lands in `ledger`.
pub fn random_rollout(pack: &TaskPack, seed: u64, max_len: usize, ledger: Arc<StateLedger>) -> (SimTask, Rollout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = pack.tasks.choose(&mut rng).unwrap().clone();
    let len = rng.random_range(1..=max_len);
    let mut env = SimEnv::new(task.initial.clone(), ledger);
    let initial_screenshot = env.screenshot();
    let mut steps = Vec::with_capacity(len);
    for i in 0..len {
        let action = if i + 1 == len && rng.random_bool(0.5) { Action::done() } else { random_action(&mut rng) };
        let screenshot = env.apply(&action);
        steps.push(Step::new(action, screenshot));
    }
    let terminal_reason = if steps.last().unwrap().action.kind == widescale::trajectory::ActionKind::Done {
        TerminalReason::AgentDone
    } else {
        TerminalReason::BudgetExhausted
    };
    let rollout = Rollout {
        task_id: task.task.id.clone(),
        policy_id: "random".to_string(),
        sample_index: 0,
        seed,
        initial_screenshot,
        steps,
        terminal_reason,
    };
    (task, rollout)
}
