//! Rule-based fact generation and captioning for simulator frames.
//!
//! Both read the states behind each frame from the [`StateLedger`] instead
//! of looking at pixels. The fact generator can be told to hallucinate: a
//! transition whose hash falls below the rate gets one extra, false line
//! about a goal key.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::taskpack::SimTask;
use super::{SimState, StateLedger};
use crate::augment::AugmentedTransition;
use crate::narrative::{Caption, Captioner, Fact, FactError, FactGenerator};
use crate::raster::ImageDigest;
use crate::trajectory::{Screenshot, Task};

pub const NO_CHANGE: &str = "- no visible change";

pub fn change_line(key: &str, from: &str, to: &str) -> String {
    format!("- `{key}` changed from \"{from}\" to \"{to}\"")
}

/// Lines describing what differs between two states.
pub fn diff_lines(before: &SimState, after: &SimState) -> Vec<String> {
    let before_values: HashMap<String, String> = before.observables().into_iter().collect();
    let after_values = after.observables();
    let mut lines = Vec::new();
    for (key, value) in &after_values {
        match before_values.get(key) {
            Some(old) if old == value => {}
            Some(old) => lines.push(change_line(key, old, value)),
            None => lines.push(format!("- `{key}` appeared with \"{value}\"")),
        }
    }
    for (key, _) in before.observables() {
        if after.value(&key).is_none() {
            lines.push(format!("- `{key}` disappeared"));
        }
    }
    if before.focus != after.focus {
        match after.focused_widget() {
            Some(w) => lines.push(format!("- input focus moved to `{}`", w.key)),
            None => lines.push("- input focus was cleared".to_string()),
        }
    }
    lines
}

/// Uniform value in `[0, 1)` derived from the seed and the transition.
pub fn transition_unit(seed: u64, before: &ImageDigest, after: &ImageDigest, index: usize) -> (f64, u64) {
    let mut h = Sha256::new();
    h.update(b"widescale-hallucination-v1");
    h.update(seed.to_le_bytes());
    h.update(before.0);
    h.update(after.0);
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    let a = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    let b = u64::from_le_bytes(d[8..16].try_into().expect("8 bytes"));
    ((a >> 11) as f64 / (1u64 << 53) as f64, b)
}

pub struct RuleFactGenerator {
    ledger: Arc<StateLedger>,
    tasks: HashMap<String, SimTask>,
    pub hallucination_rate: f64,
    pub seed: u64,
    id: String,
}

impl RuleFactGenerator {
    pub fn new(ledger: Arc<StateLedger>, tasks: &[SimTask]) -> Self {
        RuleFactGenerator {
            ledger,
            tasks: tasks.iter().map(|t| (t.task.id.clone(), t.clone())).collect(),
            hallucination_rate: 0.0,
            seed: 0,
            id: "rule".to_string(),
        }
    }

    pub fn with_hallucination(mut self, rate: f64, seed: u64) -> Self {
        self.hallucination_rate = rate;
        self.seed = seed;
        self.id = format!("rule-h{rate:.3}-s{seed}");
        self
    }

    fn state(&self, digest: &ImageDigest) -> Result<Arc<SimState>, FactError> {
        self.ledger
            .get(digest)
            .ok_or_else(|| FactError::MalformedResponse(format!("frame {digest} was not rendered by the simulator")))
    }

    /// A false claim about one goal key: success when the goal is not met,
    /// a wrong value when it is.
    fn false_line(&self, task: &SimTask, after: &SimState, pick: u64) -> Option<String> {
        let conditions: Vec<_> = task.goals.iter().flatten().collect();
        if conditions.is_empty() {
            return None;
        }
        let c = conditions[(pick % conditions.len() as u64) as usize];
        let current = after.value(&c.key).unwrap_or_default();
        let claimed = if current == c.value {
            format!("{}?", c.value)
        } else {
            c.value.clone()
        };
        Some(change_line(&c.key, &current, &claimed))
    }
}

impl FactGenerator for RuleFactGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, t: &AugmentedTransition, task: &Task) -> Result<Fact, FactError> {
        let before = self.state(&t.before_digest)?;
        let after = self.state(&t.after_digest)?;
        let mut lines = diff_lines(&before, &after);
        if self.hallucination_rate > 0.0 {
            let (u, pick) = transition_unit(self.seed, &t.before_digest, &t.after_digest, t.index);
            if u < self.hallucination_rate {
                if let Some(line) = self.tasks.get(&task.id).and_then(|s| self.false_line(s, &after, pick)) {
                    lines.push(line);
                }
            }
        }
        if lines.is_empty() {
            lines.push(NO_CHANGE.to_string());
        }
        Ok(Fact {
            step_index: t.index,
            text: lines.join("\n"),
            thoughts: format!("Compared the states around {}.", t.action.payload),
            generator_id: self.id.clone(),
        })
    }
}

/// Lists every visible value of a frame.
pub struct RuleCaptioner {
    ledger: Arc<StateLedger>,
}

impl RuleCaptioner {
    pub fn new(ledger: Arc<StateLedger>) -> Self {
        RuleCaptioner { ledger }
    }
}

impl Captioner for RuleCaptioner {
    fn caption(&self, frame: &Screenshot, frame_index: usize, _task: &Task) -> Result<Caption, FactError> {
        let digest = frame.image.digest();
        let state = self
            .ledger
            .get(&digest)
            .ok_or_else(|| FactError::MalformedResponse(format!("frame {digest} was not rendered by the simulator")))?;
        let mut lines: Vec<String> = state
            .observables()
            .into_iter()
            .map(|(k, v)| format!("- `{k}` shows \"{v}\""))
            .collect();
        if let Some(w) = state.focused_widget() {
            lines.push(format!("- `{}` has input focus", w.key));
        }
        if lines.is_empty() {
            lines.push("- empty screen".to_string());
        }
        Ok(Caption {
            frame_index,
            text: lines.join("\n"),
            thoughts: String::new(),
        })
    }
}
