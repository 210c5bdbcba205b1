//! Behavior narratives: one fact per transition, bracketed by the first and
//! last screenshot, plus the two ablation representations (per-frame
//! captions and uniformly sampled screenshots).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_transition, AugmentConfig, AugmentError, AugmentedTransition};
use crate::prompts::{self, PromptSet};
use crate::trajectory::{
    frame_file_name, transitions, validate_rollout, Rollout, RolloutRef, Screenshot, Task, Violation,
};
use crate::vlm::{extract_tag, BackendError, ChatBackend, ChatRequest, SamplingParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub step_index: usize,
    pub text: String,
    pub thoughts: String,
    pub generator_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorNarrative {
    pub rollout_ref: RolloutRef,
    pub initial_screenshot: Screenshot,
    pub facts: Vec<Fact>,
    pub final_screenshot: Screenshot,
}

impl BehaviorNarrative {
    pub fn violations(&self, action_count: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.facts.len() != action_count {
            out.push(format!("{} facts for {action_count} actions", self.facts.len()));
        }
        for (i, f) in self.facts.iter().enumerate() {
            if f.step_index != i {
                out.push(format!("fact {i} has step index {}", f.step_index));
            }
            if f.text.trim().is_empty() {
                out.push(format!("fact {i} is empty"));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum FactError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    BackendUnavailable(#[from] BackendError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: FactError,
    },
    #[error("rollout is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidRollout(Vec<Violation>),
    #[error("narrative file {path}: {message}")]
    File { path: PathBuf, message: String },
}

impl NarrativeError {
    pub fn step(&self) -> Option<usize> {
        match self {
            NarrativeError::Step { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Produces the fact for one augmented transition.
pub trait FactGenerator: Sync {
    fn id(&self) -> &str;
    fn generate(&self, transition: &AugmentedTransition, task: &Task) -> Result<Fact, FactError>;
}

pub const DEFAULT_FACT_RETRIES: u32 = 2;

/// Asks a multimodal model to describe each transition.
pub struct VlmFactGenerator<B> {
    pub backend: B,
    pub prompts: PromptSet,
    pub model_id: String,
    pub sampling: SamplingParams,
    pub retries: u32,
}

impl<B: ChatBackend> VlmFactGenerator<B> {
    pub fn new(backend: B, prompts: PromptSet, model_id: impl Into<String>) -> Self {
        VlmFactGenerator {
            backend,
            prompts,
            model_id: model_id.into(),
            sampling: SamplingParams::default(),
            retries: DEFAULT_FACT_RETRIES,
        }
    }

    pub fn request(&self, t: &AugmentedTransition, task: &Task) -> ChatRequest {
        let mut req = ChatRequest::new(&self.model_id, self.prompts.get(prompts::FACT_GENERATOR).text.clone())
            .text(format!("Task: {}", task.instruction))
            .text("Before screenshot:")
            .image(t.before_marked.image.clone())
            .text(format!("Action:\n{}", t.action.payload))
            .text("After screenshot:")
            .image(t.after_outlined.image.clone());
        if let Some(zoom) = &t.zoom_crop {
            req = req.text("Zoomed-in view of the outlined area:").image(zoom.clone());
        }
        req.sampling = self.sampling;
        req
    }
}

/// Splits a tagged reply into `(thoughts, answer)`; the answer tag is required
/// and must not be empty.
pub fn parse_tagged_reply(reply: &str) -> Result<(String, String), FactError> {
    let answer = extract_tag(reply, "answer")
        .ok_or_else(|| FactError::MalformedResponse("missing <answer> tag".to_string()))?;
    if answer.is_empty() {
        return Err(FactError::MalformedResponse("empty <answer>".to_string()));
    }
    let thoughts = extract_tag(reply, "thoughts").unwrap_or_default();
    Ok((thoughts.to_string(), answer.to_string()))
}

/// Sends `request` up to `1 + retries` times, varying the sampling seed
/// after the first attempt, until `parse` accepts the reply.
pub fn complete_with_retries<T>(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    retries: u32,
    parse: impl Fn(&str) -> Result<T, FactError>,
) -> Result<T, FactError> {
    let mut last = None;
    for attempt in 0..=retries {
        let mut req = request.clone();
        if attempt > 0 {
            req.sampling.seed = Some(req.sampling.seed.unwrap_or(0).wrapping_add(attempt as u64));
        }
        match backend.complete(&req).map_err(FactError::from).and_then(|r| parse(&r)) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

impl<B: ChatBackend> FactGenerator for VlmFactGenerator<B> {
    fn id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, t: &AugmentedTransition, task: &Task) -> Result<Fact, FactError> {
        let (thoughts, text) =
            complete_with_retries(&self.backend, &self.request(t, task), self.retries, parse_tagged_reply)?;
        Ok(Fact {
            step_index: t.index,
            text,
            thoughts,
            generator_id: self.id().to_string(),
        })
    }
}

/// Augments every transition and generates its fact in parallel. Any failure
/// aborts the whole narrative; the reported step is the lowest failing one.
pub fn build_narrative(
    rollout: &Rollout,
    task: &Task,
    generator: &dyn FactGenerator,
    config: &AugmentConfig,
) -> Result<BehaviorNarrative, NarrativeError> {
    let problems = validate_rollout(rollout, task);
    if !problems.is_empty() {
        return Err(NarrativeError::InvalidRollout(problems));
    }
    let results: Vec<Result<Fact, NarrativeError>> = transitions(rollout)
        .par_iter()
        .map(|t| {
            let step = t.index;
            let augmented = augment_transition(t, config)
                .map_err(|e| NarrativeError::Step { step, source: e.into() })?;
            let mut fact = generator
                .generate(&augmented, task)
                .map_err(|source| NarrativeError::Step { step, source })?;
            fact.step_index = step;
            Ok(fact)
        })
        .collect();
    let facts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(BehaviorNarrative {
        rollout_ref: rollout.reference(),
        initial_screenshot: rollout.initial_screenshot.clone(),
        facts,
        final_screenshot: rollout.final_screenshot().clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub frame_index: usize,
    pub text: String,
    pub thoughts: String,
}

/// Describes a single screenshot with no knowledge of the action taken.
pub trait Captioner: Sync {
    fn caption(&self, frame: &Screenshot, frame_index: usize, task: &Task) -> Result<Caption, FactError>;
}

pub struct VlmCaptioner<B> {
    pub backend: B,
    pub prompts: PromptSet,
    pub model_id: String,
    pub sampling: SamplingParams,
    pub retries: u32,
}

impl<B: ChatBackend> VlmCaptioner<B> {
    pub fn new(backend: B, prompts: PromptSet, model_id: impl Into<String>) -> Self {
        VlmCaptioner {
            backend,
            prompts,
            model_id: model_id.into(),
            sampling: SamplingParams::default(),
            retries: DEFAULT_FACT_RETRIES,
        }
    }
}

impl<B: ChatBackend> Captioner for VlmCaptioner<B> {
    fn caption(&self, frame: &Screenshot, frame_index: usize, task: &Task) -> Result<Caption, FactError> {
        let mut req = ChatRequest::new(&self.model_id, self.prompts.get(prompts::CAPTION).text.clone())
            .text(format!("Task: {}", task.instruction))
            .image(frame.image.clone());
        req.sampling = self.sampling;
        let (thoughts, text) = complete_with_retries(&self.backend, &req, self.retries, parse_tagged_reply)?;
        Ok(Caption {
            frame_index,
            text,
            thoughts,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveCaptions {
    pub rollout_ref: RolloutRef,
    pub frames: Vec<Screenshot>,
    pub captions: Vec<Caption>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScreenshotSample {
    pub rollout_ref: RolloutRef,
    pub frame_indices: Vec<usize>,
    pub frames: Vec<Screenshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    BehaviorNarrative(BehaviorNarrative),
    NaiveCaptions(NaiveCaptions),
    ScreenshotsOnly(ScreenshotSample),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    #[serde(alias = "narrative")]
    BehaviorNarrative,
    #[serde(alias = "captions")]
    NaiveCaptions,
    #[serde(alias = "screenshots")]
    ScreenshotsOnly,
}

impl Representation {
    pub fn kind(&self) -> RepresentationKind {
        match self {
            Representation::BehaviorNarrative(_) => RepresentationKind::BehaviorNarrative,
            Representation::NaiveCaptions(_) => RepresentationKind::NaiveCaptions,
            Representation::ScreenshotsOnly(_) => RepresentationKind::ScreenshotsOnly,
        }
    }
}

/// Captions all `T + 1` frames independently.
pub fn build_naive_captions(
    rollout: &Rollout,
    task: &Task,
    captioner: &dyn Captioner,
) -> Result<Representation, NarrativeError> {
    let frames: Vec<Screenshot> = rollout.frames().cloned().collect();
    let captions = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            captioner
                .caption(f, i, task)
                .map_err(|source| NarrativeError::Step { step: i, source })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Representation::NaiveCaptions(NaiveCaptions {
        rollout_ref: rollout.reference(),
        frames,
        captions,
    }))
}

/// Frame budget per trajectory when `n_candidates` share a 50-image budget.
pub fn screenshot_budget(n_candidates: usize) -> usize {
    (50 / n_candidates.max(1)).max(1)
}

/// `k` indices spread uniformly over `0..frame_count`, always including the
/// last frame and, when `k >= 2`, the first. Asking for more frames than
/// exist returns every frame.
pub fn uniform_indices(frame_count: usize, k: usize) -> Vec<usize> {
    if frame_count == 0 || k == 0 {
        return Vec::new();
    }
    if k >= frame_count {
        return (0..frame_count).collect();
    }
    if k == 1 {
        return vec![frame_count - 1];
    }
    let last = (frame_count - 1) as f64;
    (0..k)
        .map(|i| (i as f64 * last / (k - 1) as f64).round() as usize)
        .collect()
}

pub fn sample_screenshots_only(rollout: &Rollout, n_candidates: usize) -> Representation {
    let frames: Vec<&Screenshot> = rollout.frames().collect();
    let frame_indices = uniform_indices(frames.len(), screenshot_budget(n_candidates));
    Representation::ScreenshotsOnly(ScreenshotSample {
        rollout_ref: rollout.reference(),
        frames: frame_indices.iter().map(|&i| frames[i].clone()).collect(),
        frame_indices,
    })
}

pub const NARRATIVE_FILE: &str = "narrative.json";
pub const NARRATIVE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NarrativeFile {
    schema_version: u32,
    rollout: RolloutRef,
    initial_image: String,
    final_image: String,
    facts: Vec<Fact>,
}

/// The contents of [`NARRATIVE_FILE`]; frames are referenced by file name.
pub fn narrative_json(narrative: &BehaviorNarrative) -> String {
    let file = NarrativeFile {
        schema_version: NARRATIVE_SCHEMA_VERSION,
        rollout: narrative.rollout_ref.clone(),
        initial_image: frame_file_name(0),
        final_image: frame_file_name(narrative.facts.len()),
        facts: narrative.facts.clone(),
    };
    serde_json::to_string_pretty(&file).expect("narrative serializes") + "\n"
}

/// Writes the narrative next to the rollout frames it references.
pub fn save_narrative(narrative: &BehaviorNarrative, rollout_dir: &Path) -> Result<PathBuf, NarrativeError> {
    let path = rollout_dir.join(NARRATIVE_FILE);
    let text = narrative_json(narrative);
    fs::create_dir_all(rollout_dir)
        .and_then(|_| fs::write(&path, text))
        .map_err(|e| NarrativeError::File {
            path: path.clone(),
            message: e.to_string(),
        })?;
    Ok(path)
}

/// Reads a saved narrative and reattaches the first and last frames of
/// `rollout`, which must be the rollout it was generated from.
pub fn load_narrative(rollout_dir: &Path, rollout: &Rollout) -> Result<BehaviorNarrative, NarrativeError> {
    let path = rollout_dir.join(NARRATIVE_FILE);
    let fail = |message: String| NarrativeError::File {
        path: path.clone(),
        message,
    };
    let text = fs::read_to_string(&path).map_err(|e| fail(e.to_string()))?;
    let file: NarrativeFile = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if file.schema_version != NARRATIVE_SCHEMA_VERSION {
        return Err(fail(format!("unsupported schema version {}", file.schema_version)));
    }
    if file.rollout != rollout.reference() {
        return Err(fail("narrative belongs to a different rollout".to_string()));
    }
    let narrative = BehaviorNarrative {
        rollout_ref: file.rollout,
        initial_screenshot: rollout.initial_screenshot.clone(),
        facts: file.facts,
        final_screenshot: rollout.final_screenshot().clone(),
    };
    let problems = narrative.violations(rollout.len());
    if !problems.is_empty() {
        return Err(fail(problems.join("; ")));
    }
    Ok(narrative)
}
