//! Selecting one rollout out of N.
//!
//! Three strategies share one candidate payload format:
//! * [`Strategy::Mcq`] shows every candidate in a single request and asks for
//!   the index of the best one.
//! * [`Strategy::IterativePairwise`] plays candidates off two at a time in
//!   set order, carrying the winner forward.
//! * [`Strategy::IndependentRank`] scores every candidate alone from 1 to 5
//!   and takes the argmax, breaking ties with a seeded generator.
//!
//! `judge_calls` and `trajectory_inputs_consumed` count logical judge
//! queries, so they follow the strategy formulas exactly; retries are
//! reported separately in `backend_requests`.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::narrative::{BehaviorNarrative, Representation};
use crate::prompts::{self, PromptSet, PromptTemplate};
use crate::trajectory::{RolloutRef, Task};
use crate::vlm::{extract_tag, BackendError, ChatBackend, ChatRequest, SamplingParams, UserPart};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mcq,
    #[serde(alias = "iterative")]
    IterativePairwise,
    #[serde(alias = "independent")]
    IndependentRank,
}

impl Strategy {
    /// `(judge_calls, trajectory_inputs_consumed)` for `n` candidates.
    pub fn cost(self, n: usize) -> (usize, usize) {
        match self {
            Strategy::Mcq => (1, n),
            Strategy::IterativePairwise => (n.saturating_sub(1), 2 * n.saturating_sub(1)),
            Strategy::IndependentRank => (n, n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankScore {
    pub candidate_index: usize,
    pub score: u8,
}

impl RankScore {
    pub fn new(candidate_index: usize, score: u8) -> Option<Self> {
        (1..=5).contains(&score).then_some(RankScore {
            candidate_index,
            score,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// 1-based.
    pub chosen_index: usize,
    pub reasoning: String,
    pub judge_calls: usize,
    pub trajectory_inputs_consumed: usize,
    pub strategy: Strategy,
    pub citing_enabled: bool,
    /// Set when the judge failed and candidate 1 was submitted instead.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<RankScore>,
    /// Requests actually sent, retries included.
    pub backend_requests: u32,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("{strategy:?} needs at least {min} candidates, got {n}")]
    NotEnoughCandidates { strategy: Strategy, min: usize, n: usize },
    #[error("candidate {index} belongs to task {found:?}, expected {expected:?}")]
    TaskMismatch { index: usize, found: String, expected: String },
    #[error("malformed judge response: {0}")]
    MalformedResponse(String),
    #[error("judge answered {answer}, outside 1..={n}")]
    OutOfRange { answer: i64, n: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scoring failed for every candidate ({}): {last}", .candidates.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", "))]
    ScoringFailed { candidates: Vec<usize>, last: String },
}

pub const TRAJECTORY_HEADER: &str = "### Trajectory";
pub const MCQ_INSTRUCTION: &str = "Select the best of the trajectories above.";
pub const SCORE_INSTRUCTION: &str = "Score this trajectory from 1 to 5.";
const CITATION_TOKEN: &str = "<CITATION_INSTRUCTIONS>";

fn rollout_ref(rep: &Representation) -> &RolloutRef {
    match rep {
        Representation::BehaviorNarrative(n) => &n.rollout_ref,
        Representation::NaiveCaptions(c) => &c.rollout_ref,
        Representation::ScreenshotsOnly(s) => &s.rollout_ref,
    }
}

impl From<BehaviorNarrative> for Representation {
    fn from(n: BehaviorNarrative) -> Self {
        Representation::BehaviorNarrative(n)
    }
}

/// The parts describing one candidate under a 1-based header. Narratives
/// contribute `s_0`, the fact texts and `s_T`; the ablation representations
/// contribute their frames, each followed by its caption if any. The final
/// image of every block is always the last frame of the rollout.
pub fn candidate_parts(rep: &Representation, label: usize) -> Vec<UserPart> {
    let mut parts = vec![UserPart::Text(format!("{TRAJECTORY_HEADER} {label}"))];
    match rep {
        Representation::BehaviorNarrative(n) => {
            parts.push(UserPart::text("Initial screenshot:"));
            parts.push(UserPart::Image(n.initial_screenshot.image.clone()));
            let facts: Vec<String> = n
                .facts
                .iter()
                .map(|f| format!("Fact {}:\n{}", f.step_index + 1, f.text))
                .collect();
            parts.push(UserPart::Text(if facts.is_empty() {
                "(no actions)".to_string()
            } else {
                facts.join("\n")
            }));
            parts.push(UserPart::text("Final screenshot:"));
            parts.push(UserPart::Image(n.final_screenshot.image.clone()));
        }
        Representation::NaiveCaptions(c) => {
            for (frame, caption) in c.frames.iter().zip(&c.captions) {
                parts.push(UserPart::Text(format!("Screenshot {}:", caption.frame_index + 1)));
                parts.push(UserPart::Image(frame.image.clone()));
                parts.push(UserPart::Text(format!("Caption:\n{}", caption.text)));
            }
        }
        Representation::ScreenshotsOnly(s) => {
            for (frame, index) in s.frames.iter().zip(&s.frame_indices) {
                parts.push(UserPart::Text(format!("Screenshot {}:", index + 1)));
                parts.push(UserPart::Image(frame.image.clone()));
            }
        }
    }
    parts
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeConfig {
    pub model_id: String,
    pub sampling: SamplingParams,
    pub retries: u32,
    pub citing: bool,
    /// Replaces the builtin guideline block when set.
    pub guidelines: Option<String>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            model_id: String::new(),
            sampling: SamplingParams::default(),
            retries: 2,
            citing: true,
            guidelines: None,
        }
    }
}

pub struct Judge<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a PromptSet,
    pub config: JudgeConfig,
}

struct Reply {
    thoughts: String,
    value: i64,
}

fn parse_int_answer(reply: &str) -> Result<Reply, JudgeError> {
    let answer = extract_tag(reply, "answer")
        .ok_or_else(|| JudgeError::MalformedResponse("missing <answer> tag".to_string()))?;
    let value = answer
        .trim_matches(|c: char| c.is_whitespace() || c == '[' || c == ']' || c == '.')
        .parse::<i64>()
        .map_err(|_| JudgeError::MalformedResponse(format!("answer {answer:?} is not an integer")))?;
    Ok(Reply {
        thoughts: extract_tag(reply, "thoughts").unwrap_or_default().to_string(),
        value,
    })
}

impl<'a> Judge<'a> {
    pub fn new(backend: &'a dyn ChatBackend, prompts: &'a PromptSet, config: JudgeConfig) -> Self {
        Judge {
            backend,
            prompts,
            config,
        }
    }

    fn guidelines(&self) -> String {
        self.config
            .guidelines
            .clone()
            .unwrap_or_else(|| self.prompts.get(prompts::JUDGE_GUIDELINES).text.clone())
            .trim_end()
            .to_string()
    }

    fn check(&self, strategy: Strategy, candidates: &[Representation], task: &Task, min: usize) -> Result<(), JudgeError> {
        if candidates.len() < min {
            return Err(JudgeError::NotEnoughCandidates {
                strategy,
                min,
                n: candidates.len(),
            });
        }
        for (i, c) in candidates.iter().enumerate() {
            let found = &rollout_ref(c).task_id;
            if *found != task.id {
                return Err(JudgeError::TaskMismatch {
                    index: i + 1,
                    found: found.clone(),
                    expected: task.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// System prompt for an `n`-way comparison. Without citing, the citation
    /// line is dropped entirely and nothing else changes.
    pub fn mcq_system_prompt(&self, n: usize, task: &Task) -> String {
        let base = &self.prompts.get(prompts::JUDGE_SYSTEM).text;
        let citation = self.prompts.get(prompts::JUDGE_CITING).text.trim_end().to_string();
        let text = if self.config.citing {
            base.clone()
        } else {
            base.replace(&format!("{CITATION_TOKEN}\n"), "").replace(CITATION_TOKEN, "")
        };
        let template = PromptTemplate::new(prompts::JUDGE_SYSTEM, text);
        let n = n.to_string();
        let guidelines = self.guidelines();
        let mut values = vec![
            ("<NUMBER OF TRAJECTORIES>", n.as_str()),
            ("<TASK_DESCRIPTION_INPUT>", task.instruction.as_str()),
            ("<JUDGE_GUIDELINES>", guidelines.as_str()),
        ];
        if self.config.citing {
            values.push((CITATION_TOKEN, citation.as_str()));
        }
        template.render(&values).expect("judge template placeholders are fixed")
    }

    pub fn build_mcq_prompt(&self, candidates: &[Representation], task: &Task) -> Result<ChatRequest, JudgeError> {
        self.check(Strategy::Mcq, candidates, task, 2)?;
        Ok(self.mcq_request(candidates.iter().collect::<Vec<_>>().as_slice(), task))
    }

    fn mcq_request(&self, candidates: &[&Representation], task: &Task) -> ChatRequest {
        let mut req = ChatRequest::new(&self.config.model_id, self.mcq_system_prompt(candidates.len(), task));
        for (i, c) in candidates.iter().enumerate() {
            req.parts.extend(candidate_parts(c, i + 1));
        }
        req.parts.push(UserPart::text(MCQ_INSTRUCTION));
        req.sampling = self.config.sampling;
        req
    }

    fn score_request(&self, candidate: &Representation, task: &Task) -> ChatRequest {
        let template = self.prompts.get(prompts::INDEPENDENT_JUDGE);
        let guidelines = self.guidelines();
        let system = template
            .render(&[
                ("<TASK_DESCRIPTION_INPUT>", task.instruction.as_str()),
                ("<JUDGE_GUIDELINES>", guidelines.as_str()),
            ])
            .expect("independent judge placeholders are fixed");
        let mut req = ChatRequest::new(&self.config.model_id, system);
        req.parts.extend(candidate_parts(candidate, 1));
        req.parts.push(UserPart::text(SCORE_INSTRUCTION));
        req.sampling = self.config.sampling;
        req
    }

    /// Sends `request` until `accept` is satisfied or retries run out.
    fn ask(
        &self,
        request: &ChatRequest,
        sent: &AtomicU32,
        accept: impl Fn(i64) -> Result<(), JudgeError>,
    ) -> Result<Reply, JudgeError> {
        let mut last = None;
        for attempt in 0..=self.config.retries {
            let mut req = request.clone();
            if attempt > 0 {
                req.sampling.seed = Some(req.sampling.seed.unwrap_or(0).wrapping_add(attempt as u64));
            }
            sent.fetch_add(1, Ordering::Relaxed);
            let outcome = self
                .backend
                .complete(&req)
                .map_err(JudgeError::from)
                .and_then(|text| parse_int_answer(&text))
                .and_then(|reply| accept(reply.value).map(|_| reply));
            match outcome {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "judge attempt rejected");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn result(&self, strategy: Strategy, n: usize, chosen_index: usize, reasoning: String, sent: &AtomicU32) -> SelectionResult {
        let (judge_calls, trajectory_inputs_consumed) = strategy.cost(n);
        SelectionResult {
            chosen_index,
            reasoning,
            judge_calls,
            trajectory_inputs_consumed,
            strategy,
            citing_enabled: self.config.citing && strategy != Strategy::IndependentRank,
            fallback: false,
            failure: None,
            scores: Vec::new(),
            backend_requests: sent.load(Ordering::Relaxed),
        }
    }

    fn in_range(n: usize) -> impl Fn(i64) -> Result<(), JudgeError> {
        move |k| {
            if k >= 1 && k as usize <= n {
                Ok(())
            } else {
                Err(JudgeError::OutOfRange { answer: k, n })
            }
        }
    }

    pub fn select_mcq(&self, candidates: &[Representation], task: &Task) -> Result<SelectionResult, JudgeError> {
        let request = self.build_mcq_prompt(candidates, task)?;
        let sent = AtomicU32::new(0);
        let n = candidates.len();
        let reply = self.ask(&request, &sent, Self::in_range(n))?;
        Ok(self.result(Strategy::Mcq, n, reply.value as usize, reply.thoughts, &sent))
    }

    pub fn select_iterative(&self, candidates: &[Representation], task: &Task) -> Result<SelectionResult, JudgeError> {
        self.check(Strategy::IterativePairwise, candidates, task, 2)?;
        let sent = AtomicU32::new(0);
        let mut winner = 0usize;
        let mut reasoning = Vec::new();
        for challenger in 1..candidates.len() {
            let request = self.mcq_request(&[&candidates[winner], &candidates[challenger]], task);
            let reply = self.ask(&request, &sent, Self::in_range(2))?;
            let incumbent = winner;
            if reply.value == 2 {
                winner = challenger;
            }
            reasoning.push(format!(
                "Match {challenger}: trajectory {} vs trajectory {}, winner {}\n{}",
                incumbent + 1,
                challenger + 1,
                winner + 1,
                reply.thoughts
            ));
        }
        Ok(self.result(
            Strategy::IterativePairwise,
            candidates.len(),
            winner + 1,
            reasoning.join("\n\n"),
            &sent,
        ))
    }

    /// Scores every candidate concurrently. Candidates whose score cannot be
    /// obtained are left out of the argmax; if none can be scored the call
    /// fails and lists them all.
    pub fn select_independent(
        &self,
        candidates: &[Representation],
        task: &Task,
        rng_seed: u64,
    ) -> Result<SelectionResult, JudgeError> {
        self.check(Strategy::IndependentRank, candidates, task, 1)?;
        let sent = AtomicU32::new(0);
        let outcomes: Vec<Result<Reply, JudgeError>> = candidates
            .par_iter()
            .map(|c| {
                let request = self.score_request(c, task);
                self.ask(&request, &sent, |s| {
                    if (1..=5).contains(&s) {
                        Ok(())
                    } else {
                        Err(JudgeError::OutOfRange { answer: s, n: 5 })
                    }
                })
            })
            .collect();
        let mut scores = Vec::new();
        let mut reasoning = Vec::new();
        let mut failed = Vec::new();
        let mut last = String::new();
        for (i, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(reply) => {
                    scores.push(RankScore::new(i + 1, reply.value as u8).expect("score checked"));
                    reasoning.push(format!("Trajectory {} scored {}:\n{}", i + 1, reply.value, reply.thoughts));
                }
                Err(e) => {
                    failed.push(i + 1);
                    last = e.to_string();
                    reasoning.push(format!("Trajectory {} could not be scored: {e}", i + 1));
                }
            }
        }
        if scores.is_empty() {
            return Err(JudgeError::ScoringFailed {
                candidates: failed,
                last,
            });
        }
        let chosen_index = pick_highest(&scores, rng_seed);
        let mut result = self.result(
            Strategy::IndependentRank,
            candidates.len(),
            chosen_index,
            reasoning.join("\n\n"),
            &sent,
        );
        result.scores = scores;
        Ok(result)
    }

    pub fn select(
        &self,
        strategy: Strategy,
        candidates: &[Representation],
        task: &Task,
        rng_seed: u64,
    ) -> Result<SelectionResult, JudgeError> {
        match strategy {
            Strategy::Mcq => self.select_mcq(candidates, task),
            Strategy::IterativePairwise => self.select_iterative(candidates, task),
            Strategy::IndependentRank => self.select_independent(candidates, task, rng_seed),
        }
    }

    /// Pipeline entry point. A single candidate is selected without a judge
    /// call, and a judge that keeps failing yields candidate 1 with the
    /// `fallback` flag set. Mismatched task ids are still an error.
    pub fn select_or_fallback(
        &self,
        strategy: Strategy,
        candidates: &[Representation],
        task: &Task,
        rng_seed: u64,
    ) -> Result<SelectionResult, JudgeError> {
        self.check(strategy, candidates, task, 1)?;
        if candidates.len() == 1 {
            return Ok(SelectionResult {
                chosen_index: 1,
                reasoning: "single candidate".to_string(),
                judge_calls: 0,
                trajectory_inputs_consumed: 0,
                strategy,
                citing_enabled: self.config.citing && strategy != Strategy::IndependentRank,
                fallback: false,
                failure: None,
                scores: Vec::new(),
                backend_requests: 0,
            });
        }
        match self.select(strategy, candidates, task, rng_seed) {
            Ok(r) => Ok(r),
            Err(e) => {
                tracing::warn!(task = %task.id, error = %e, "judge failed, submitting candidate 1");
                let (judge_calls, trajectory_inputs_consumed) = strategy.cost(candidates.len());
                Ok(SelectionResult {
                    chosen_index: 1,
                    reasoning: String::new(),
                    judge_calls,
                    trajectory_inputs_consumed,
                    strategy,
                    citing_enabled: self.config.citing && strategy != Strategy::IndependentRank,
                    fallback: true,
                    failure: Some(e.to_string()),
                    scores: Vec::new(),
                    backend_requests: 0,
                })
            }
        }
    }
}

/// Highest score wins; ties are broken uniformly with a generator seeded by
/// `rng_seed`.
pub fn pick_highest(scores: &[RankScore], rng_seed: u64) -> usize {
    let best = scores.iter().map(|s| s.score).max().expect("non-empty scores");
    let tied: Vec<usize> = scores
        .iter()
        .filter(|s| s.score == best)
        .map(|s| s.candidate_index)
        .collect();
    if tied.len() == 1 {
        return tied[0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    tied[rng.random_range(0..tied.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_formulas() {
        assert_eq!(Strategy::Mcq.cost(5), (1, 5));
        assert_eq!(Strategy::IterativePairwise.cost(5), (4, 8));
        assert_eq!(Strategy::IterativePairwise.cost(2), (1, 2));
        assert_eq!(Strategy::IndependentRank.cost(3), (3, 3));
    }

    #[test]
    fn argmax_without_ties_ignores_seed() {
        let scores: Vec<_> = [3, 5, 2]
            .iter()
            .enumerate()
            .map(|(i, &s)| RankScore::new(i + 1, s).unwrap())
            .collect();
        for seed in 0..10 {
            assert_eq!(pick_highest(&scores, seed), 2);
        }
    }

    #[test]
    fn rank_score_bounds() {
        assert!(RankScore::new(1, 0).is_none());
        assert!(RankScore::new(1, 6).is_none());
        assert!(RankScore::new(1, 5).is_some());
    }

    #[test]
    fn int_answers_tolerate_brackets() {
        assert_eq!(parse_int_answer("<answer>[2]</answer>").unwrap().value, 2);
        assert!(parse_int_answer("<answer>two</answer>").is_err());
        assert!(parse_int_answer("2").is_err());
    }
}
