//! Mock judge backends for offline runs.
//!
//! They answer the two judge request shapes: a comparison ending in
//! [`MCQ_INSTRUCTION`] and a single-candidate scoring request ending in
//! [`SCORE_INSTRUCTION`]. Candidate blocks are split on the trajectory
//! header; the last image of a block is the rollout's final frame.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::taskpack::SimTask;
use super::render;
use crate::judge::{MCQ_INSTRUCTION, SCORE_INSTRUCTION, TRAJECTORY_HEADER};
use crate::raster::{ImageDigest, Raster};
use crate::vlm::{BackendError, ChatBackend, ChatRequest, UserPart};

#[derive(Clone, Debug, Default)]
pub struct CandidateBlock {
    pub images: Vec<Arc<Raster>>,
    pub texts: Vec<String>,
}

impl CandidateBlock {
    pub fn final_digest(&self) -> Option<ImageDigest> {
        self.images.last().map(|r| r.digest())
    }

    pub fn initial_digest(&self) -> Option<ImageDigest> {
        self.images.first().map(|r| r.digest())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JudgeAsk {
    Choose,
    Score,
}

/// Splits a judge request into its question and candidate blocks.
pub fn parse_judge_request(request: &ChatRequest) -> Result<(JudgeAsk, Vec<CandidateBlock>), BackendError> {
    let ask = match request.parts.last().and_then(UserPart::as_text) {
        Some(MCQ_INSTRUCTION) => JudgeAsk::Choose,
        Some(SCORE_INSTRUCTION) => JudgeAsk::Score,
        _ => return Err(BackendError::Rejected("not a judge request".to_string())),
    };
    let mut blocks: Vec<CandidateBlock> = Vec::new();
    for part in &request.parts[..request.parts.len() - 1] {
        match part {
            UserPart::Text(t) if t.starts_with(TRAJECTORY_HEADER) => blocks.push(CandidateBlock::default()),
            UserPart::Text(t) => {
                if let Some(b) = blocks.last_mut() {
                    b.texts.push(t.clone());
                }
            }
            UserPart::Image(r) => {
                if let Some(b) = blocks.last_mut() {
                    b.images.push(r.clone());
                }
            }
        }
    }
    if blocks.is_empty() {
        return Err(BackendError::Rejected("judge request holds no candidates".to_string()));
    }
    Ok((ask, blocks))
}

fn reply(thoughts: &str, answer: usize) -> String {
    format!("<thoughts>{thoughts}</thoughts><answer>{answer}</answer>")
}

/// Knows every candidate's reward by its final frame; picks the best,
/// lowest index on ties.
pub struct OracleJudge {
    rewards: HashMap<ImageDigest, f64>,
}

impl OracleJudge {
    pub fn new(rewards: HashMap<ImageDigest, f64>) -> Self {
        OracleJudge { rewards }
    }

    fn reward(&self, block: &CandidateBlock) -> f64 {
        block
            .final_digest()
            .and_then(|d| self.rewards.get(&d).copied())
            .unwrap_or(0.0)
    }
}

impl ChatBackend for OracleJudge {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let (ask, blocks) = parse_judge_request(request)?;
        let rewards: Vec<f64> = blocks.iter().map(|b| self.reward(b)).collect();
        Ok(match ask {
            JudgeAsk::Choose => {
                let mut best = 0;
                for (i, r) in rewards.iter().enumerate() {
                    if *r > rewards[best] {
                        best = i;
                    }
                }
                reply("Oracle choice.", best + 1)
            }
            JudgeAsk::Score => reply("Oracle score.", if rewards[0] >= 1.0 { 5 } else { 1 }),
        })
    }
}

/// Always picks the first candidate and scores everything 3.
#[derive(Clone, Debug, Default)]
pub struct FirstChoiceJudge;

impl ChatBackend for FirstChoiceJudge {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let (ask, _) = parse_judge_request(request)?;
        Ok(match ask {
            JudgeAsk::Choose => reply("First candidate.", 1),
            JudgeAsk::Score => reply("Neutral score.", 3),
        })
    }
}

/// Uniform answers, reproducible from the seed and the request fingerprint.
#[derive(Clone, Debug)]
pub struct RandomChoiceJudge {
    pub seed: u64,
}

impl RandomChoiceJudge {
    pub fn new(seed: u64) -> Self {
        RandomChoiceJudge { seed }
    }
}

impl ChatBackend for RandomChoiceJudge {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let (ask, blocks) = parse_judge_request(request)?;
        let fp = request.fingerprint();
        let mix = u64::from_le_bytes(fp.0[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ mix);
        Ok(match ask {
            JudgeAsk::Choose => reply("Random choice.", rng.random_range(1..=blocks.len())),
            JudgeAsk::Score => reply("Random score.", rng.random_range(1..=5)),
        })
    }
}

fn change_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^- `([^`]+)` changed from "(.*)" to "(.*)"$"#).expect("valid regex"))
}

/// Reads the narrative facts: replays every `changed from .. to ..` line and
/// picks the first candidate whose claimed end state meets the goal. The
/// task is recognized by its initial frame, or else by its instruction.
pub struct KeywordJudge {
    tasks: Vec<SimTask>,
    by_initial: HashMap<ImageDigest, usize>,
}

impl KeywordJudge {
    pub fn new(tasks: &[SimTask]) -> Self {
        let by_initial = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (Raster::new(render(&t.initial)).digest(), i))
            .collect();
        KeywordJudge {
            tasks: tasks.to_vec(),
            by_initial,
        }
    }

    fn task_for(&self, request: &ChatRequest, blocks: &[CandidateBlock]) -> Option<&SimTask> {
        blocks
            .iter()
            .filter_map(CandidateBlock::initial_digest)
            .find_map(|d| self.by_initial.get(&d))
            .map(|&i| &self.tasks[i])
            .or_else(|| {
                self.tasks
                    .iter()
                    .filter(|t| request.system.contains(&t.task.instruction))
                    .max_by_key(|t| t.task.instruction.len())
            })
    }

    /// Whether the claims in `block` satisfy any goal alternative.
    pub fn claims_success(task: &SimTask, block: &CandidateBlock) -> bool {
        let mut claimed: HashMap<String, String> = HashMap::new();
        for text in &block.texts {
            for line in text.lines() {
                if let Some(c) = change_regex().captures(line.trim()) {
                    claimed.insert(c[1].to_string(), c[3].to_string());
                }
            }
        }
        task.goals
            .iter()
            .any(|alt| alt.iter().all(|c| claimed.get(&c.key) == Some(&c.value)))
    }
}

impl ChatBackend for KeywordJudge {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let (ask, blocks) = parse_judge_request(request)?;
        let task = self
            .task_for(request, &blocks)
            .ok_or_else(|| BackendError::Rejected("task not found in the pack".to_string()))?;
        Ok(match ask {
            JudgeAsk::Choose => {
                let k = blocks
                    .iter()
                    .position(|b| Self::claims_success(task, b))
                    .map_or(1, |i| i + 1);
                reply("First candidate whose facts reach the goal.", k)
            }
            JudgeAsk::Score => {
                let ok = Self::claims_success(task, &blocks[0]);
                reply("Goal check on the facts.", if ok { 5 } else { 1 })
            }
        })
    }
}
