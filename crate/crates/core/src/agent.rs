//! Flat GUI policy with an integrated code agent.
//!
//! The policy picks one action per step from the current screenshot and its
//! running history. One of those actions, `agent.call_code_agent(...)`,
//! starts a bounded code session: a generator proposes one code block per
//! step, an executor runs it, and the feedback of every executed step is fed
//! back until the generator answers `DONE` or `FAIL` or the budget runs out.
//! The session report is rendered as a hand-off block and appended to the
//! policy history before the next GUI action.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::ensemble::{CandidateSpec, PolicyFactory, RolloutError};
use crate::prompts::{self, PromptSet};
use crate::trajectory::{Action, Point, Screenshot, Task};
use crate::vlm::{answer_text, extract_tag, BackendError, ChatBackend, ChatRequest, SamplingParams};

pub const DEFAULT_CODE_BUDGET: u32 = 20;
pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecFeedback {
    pub status: ExecStatus,
    pub return_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// 1-based step of the code session that produced this feedback.
    pub step_index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompletionReason {
    Done,
    Fail,
    BudgetExhausted,
}

impl fmt::Display for CompletionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompletionReason::Done => "DONE",
            CompletionReason::Fail => "FAIL",
            CompletionReason::BudgetExhausted => "BUDGET_EXHAUSTED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeLanguage {
    Python,
    Bash,
}

impl fmt::Display for CodeLanguage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeLanguage::Python => "python",
            CodeLanguage::Bash => "bash",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub language: CodeLanguage,
    pub code: String,
}

impl CodeBlock {
    pub fn bash(code: impl Into<String>) -> Self {
        CodeBlock {
            language: CodeLanguage::Bash,
            code: code.into(),
        }
    }

    pub fn python(code: impl Into<String>) -> Self {
        CodeBlock {
            language: CodeLanguage::Python,
            code: code.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeStep {
    pub block: CodeBlock,
    pub feedback: ExecFeedback,
}

/// Outcome of one code session.
///
/// `steps_completed` counts generator turns that finished, including the
/// turn that produced `DONE` or `FAIL`; `history` holds only the turns that
/// executed code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSessionReport {
    pub instruction: String,
    pub steps_completed: u32,
    pub max_steps: u32,
    pub completion_reason: CompletionReason,
    pub summary: String,
    pub history: Vec<CodeStep>,
}

impl CodeSessionReport {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps_completed > self.max_steps {
            out.push(format!(
                "steps completed {} exceed budget {}",
                self.steps_completed, self.max_steps
            ));
        }
        if self.completion_reason == CompletionReason::BudgetExhausted
            && self.steps_completed != self.max_steps
        {
            out.push("budget exhausted before the budget was used".to_string());
        }
        for (i, step) in self.history.iter().enumerate() {
            if step.feedback.step_index == 0 || step.feedback.step_index > self.max_steps {
                out.push(format!("history entry {i} has step index {}", step.feedback.step_index));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
}

/// Runs one code block to completion. Implementations must not carry state
/// from one call to the next.
pub trait CodeExecutor {
    fn run(&mut self, block: &CodeBlock, step_index: u32) -> Result<ExecFeedback, ExecutorError>;
}

/// Runs each block in a fresh interpreter inside a throwaway directory.
///
/// The child gets an empty environment apart from `PATH`, `HOME` and
/// `TMPDIR` (all pointing into the jail) plus proxy variables aimed at a
/// closed local port, and is killed once the wall-clock limit passes.
#[derive(Clone, Debug)]
pub struct SandboxExecutor {
    pub timeout: Duration,
    pub python: PathBuf,
    pub bash: PathBuf,
    pub max_output_bytes: usize,
}

impl Default for SandboxExecutor {
    fn default() -> Self {
        SandboxExecutor {
            timeout: DEFAULT_STEP_TIMEOUT,
            python: PathBuf::from("python3"),
            bash: PathBuf::from("bash"),
            max_output_bytes: 64 * 1024,
        }
    }
}

const BLACKHOLE_PROXY: &str = "http://127.0.0.1:9";

impl SandboxExecutor {
    pub fn with_timeout(timeout: Duration) -> Self {
        SandboxExecutor {
            timeout,
            ..Self::default()
        }
    }

    fn capture(&self, mut pipe: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
        let limit = self.max_output_bytes;
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = pipe.read_to_end(&mut buf);
            let truncated = buf.len() > limit;
            buf.truncate(limit);
            let mut text = String::from_utf8_lossy(&buf).into_owned();
            if truncated {
                text.push_str("\n[output truncated]");
            }
            text
        })
    }
}

impl CodeExecutor for SandboxExecutor {
    fn run(&mut self, block: &CodeBlock, step_index: u32) -> Result<ExecFeedback, ExecutorError> {
        let jail = tempfile::tempdir().map_err(|e| ExecutorError::Unavailable(e.to_string()))?;
        let (program, script) = match block.language {
            CodeLanguage::Python => (&self.python, "step.py"),
            CodeLanguage::Bash => (&self.bash, "step.sh"),
        };
        let script_path = jail.path().join(script);
        std::fs::write(&script_path, &block.code)
            .map_err(|e| ExecutorError::Unavailable(e.to_string()))?;
        let mut command = Command::new(program);
        // Own process group, so a timeout also kills whatever the script spawned.
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut command, 0);
        let mut child = command
            .arg(&script_path)
            .current_dir(jail.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", jail.path())
            .env("TMPDIR", jail.path())
            .env("http_proxy", BLACKHOLE_PROXY)
            .env("https_proxy", BLACKHOLE_PROXY)
            .env("HTTP_PROXY", BLACKHOLE_PROXY)
            .env("HTTPS_PROXY", BLACKHOLE_PROXY)
            .env("no_proxy", "")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecutorError::Unavailable(format!("cannot start {}: {e}", program.display())))?;
        let stdout = self.capture(child.stdout.take().expect("piped stdout"));
        let stderr = self.capture(child.stderr.take().expect("piped stderr"));
        let waited = child
            .wait_timeout(self.timeout)
            .map_err(|e| ExecutorError::Unavailable(e.to_string()))?;
        let (status, return_code) = match waited {
            Some(exit) => {
                let code = exit.code().unwrap_or(-1);
                let status = if exit.success() { ExecStatus::Ok } else { ExecStatus::Error };
                (status, code)
            }
            None => {
                #[cfg(unix)]
                // SAFETY: plain syscall on the group created above.
                unsafe {
                    libc::kill(-(child.id() as i32), libc::SIGKILL);
                }
                let _ = child.kill();
                let _ = child.wait();
                (ExecStatus::Timeout, -1)
            }
        };
        let stdout = stdout.join().unwrap_or_default();
        let mut stderr = stderr.join().unwrap_or_default();
        if status == ExecStatus::Timeout {
            stderr.push_str(&format!("\n[killed after {} s]", self.timeout.as_secs_f32()));
        }
        Ok(ExecFeedback {
            status,
            return_code,
            stdout,
            stderr,
            step_index,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CodeAnswer {
    Code(CodeBlock),
    Done,
    Fail,
}

fn fence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```").expect("valid regex"))
}

/// Parses a generator reply: exactly one fenced python/bash block, or a bare
/// `DONE` / `FAIL` token, never both.
pub fn parse_code_answer(reply: &str) -> Result<CodeAnswer, String> {
    let answer = answer_text(reply);
    match answer {
        "DONE" => return Ok(CodeAnswer::Done),
        "FAIL" => return Ok(CodeAnswer::Fail),
        _ => {}
    }
    let blocks: Vec<_> = fence_regex().captures_iter(answer).collect();
    match blocks.as_slice() {
        [] => Err("answer holds neither a code block nor DONE/FAIL".to_string()),
        [one] => {
            let outside = fence_regex().replace(answer, "");
            if outside.lines().any(|l| matches!(l.trim(), "DONE" | "FAIL")) {
                return Err("answer mixes a code block with a control token".to_string());
            }
            let language = match one[1].to_ascii_lowercase().as_str() {
                "python" | "py" | "python3" => CodeLanguage::Python,
                "bash" | "sh" | "shell" => CodeLanguage::Bash,
                other => return Err(format!("unsupported code language {other:?}")),
            };
            Ok(CodeAnswer::Code(CodeBlock {
                language,
                code: one[2].to_string(),
            }))
        }
        _ => Err(format!("answer holds {} code blocks, expected one", blocks.len())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeAgentConfig {
    pub model_id: String,
    pub budget: u32,
    pub sampling: SamplingParams,
    /// Extra attempts for an unusable generator reply.
    pub retries: u32,
}

impl Default for CodeAgentConfig {
    fn default() -> Self {
        CodeAgentConfig {
            model_id: String::new(),
            budget: DEFAULT_CODE_BUDGET,
            sampling: SamplingParams::default(),
            retries: DEFAULT_RETRIES,
        }
    }
}

pub const CODE_STEP_HEADER: &str = "### Step";

fn render_code_step(step: &CodeStep) -> String {
    let f = &step.feedback;
    format!(
        "{CODE_STEP_HEADER} {} ({})\n```{}\n{}\n```\nStatus: {:?}\nReturn code: {}\nStdout:\n{}\nStderr:\n{}",
        f.step_index,
        step.block.language,
        step.block.language,
        step.block.code.trim_end(),
        f.status,
        f.return_code,
        or_none(&f.stdout),
        or_none(&f.stderr),
    )
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s.trim_end()
    }
}

fn generator_request(
    instruction: &str,
    screenshot: &Screenshot,
    history: &[CodeStep],
    k: u32,
    prompts: &PromptSet,
    config: &CodeAgentConfig,
) -> ChatRequest {
    let mut req = ChatRequest::new(&config.model_id, prompts.get(prompts::CODE_AGENT).text.clone())
        .text(format!("Task: {instruction}"))
        .image(screenshot.image.clone());
    for step in history {
        req = req.text(render_code_step(step));
    }
    req = req.text(format!(
        "This is step {k} of at most {}. Reply with the next code block, DONE or FAIL.",
        config.budget
    ));
    req.sampling = config.sampling;
    req
}

fn with_attempt_seed(mut req: ChatRequest, attempt: u32) -> ChatRequest {
    if attempt > 0 {
        let base = req.sampling.seed.unwrap_or(0);
        req.sampling.seed = Some(base.wrapping_add(attempt as u64));
    }
    req
}

fn summary_request(
    instruction: &str,
    history: &[CodeStep],
    reason: CompletionReason,
    steps: u32,
    prompts: &PromptSet,
    config: &CodeAgentConfig,
) -> ChatRequest {
    let mut req = ChatRequest::new(&config.model_id, prompts.get(prompts::CODE_SUMMARIZER).text.clone())
        .text(format!("Task: {instruction}"));
    for step in history {
        req = req.text(render_code_step(step));
    }
    req = req.text(format!(
        "The session ended with {reason} after {steps} of {} steps. Summarize it.",
        config.budget
    ));
    req.sampling = config.sampling;
    req
}

/// Runs the bounded generate/execute loop for `instruction`.
///
/// A generator that stays unusable after the configured retries ends the
/// session as `FAIL` with whatever history exists. Executor unavailability
/// is returned as an error.
pub fn run_code_session(
    instruction: &str,
    screenshot: &Screenshot,
    executor: &mut dyn CodeExecutor,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    config: &CodeAgentConfig,
) -> Result<CodeSessionReport, ExecutorError> {
    let mut history: Vec<CodeStep> = Vec::new();
    let mut reason = CompletionReason::BudgetExhausted;
    let mut steps_completed = config.budget;
    for k in 1..=config.budget {
        let request = generator_request(instruction, screenshot, &history, k, prompts, config);
        let mut answer = Err(String::new());
        for attempt in 0..=config.retries {
            answer = backend
                .complete(&with_attempt_seed(request.clone(), attempt))
                .map_err(|e| e.to_string())
                .and_then(|reply| parse_code_answer(&reply));
            if answer.is_ok() {
                break;
            }
        }
        match answer {
            Ok(CodeAnswer::Code(block)) => {
                let feedback = executor.run(&block, k)?;
                history.push(CodeStep { block, feedback });
            }
            Ok(CodeAnswer::Done) => {
                reason = CompletionReason::Done;
                steps_completed = k;
                break;
            }
            Ok(CodeAnswer::Fail) => {
                reason = CompletionReason::Fail;
                steps_completed = k;
                break;
            }
            Err(e) => {
                tracing::warn!(step = k, error = %e, "code generator failed");
                reason = CompletionReason::Fail;
                steps_completed = k - 1;
                break;
            }
        }
    }
    let request = summary_request(instruction, &history, reason, steps_completed, prompts, config);
    let summary = match backend.complete(&request) {
        Ok(text) => answer_text(&text).to_string(),
        Err(e) => format!(
            "No summary is available ({e}). {} code steps were executed; see the execution history.",
            history.len()
        ),
    };
    Ok(CodeSessionReport {
        instruction: instruction.to_string(),
        steps_completed,
        max_steps: config.budget,
        completion_reason: reason,
        summary,
        history,
    })
}

pub const HANDOFF_HEADER: &str = "## Code agent report";

/// Text appended to the GUI policy history after a code session.
pub fn render_handoff(report: &CodeSessionReport) -> String {
    let mut out = format!(
        "{HANDOFF_HEADER}\nTask: {}\nSteps completed: {}\nMax steps: {}\nCompletion reason: {}\nSummary:\n{}\nExecution history:\n",
        report.instruction,
        report.steps_completed,
        report.max_steps,
        report.completion_reason,
        or_none(&report.summary),
    );
    if report.history.is_empty() {
        out.push_str("(no code was executed)\n");
    }
    for step in &report.history {
        out.push_str(&render_code_step(step));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse action {text:?}: {reason}")]
pub struct ActionParseError {
    pub text: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Arg {
    Int(i64),
    Str(String),
}

fn split_args(s: &str) -> Result<Vec<Arg>, String> {
    let mut args = Vec::new();
    let mut chars = s.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        // Keyword arguments are accepted and their names ignored.
        let mut token = String::new();
        if c.is_ascii_alphabetic() || c == '_' {
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    token.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
            if chars.next() != Some('=') {
                return Err(format!("unexpected identifier {token}"));
            }
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
        }
        match chars.peek().copied() {
            Some(q @ ('"' | '\'')) => {
                chars.next();
                let mut value = String::new();
                loop {
                    match chars.next() {
                        None => return Err("unterminated string".to_string()),
                        Some('\\') => match chars.next() {
                            Some('n') => value.push('\n'),
                            Some('t') => value.push('\t'),
                            Some(other) => value.push(other),
                            None => return Err("unterminated string".to_string()),
                        },
                        Some(c) if c == q => break,
                        Some(c) => value.push(c),
                    }
                }
                args.push(Arg::Str(value));
            }
            Some(c) if c == '-' || c.is_ascii_digit() => {
                let mut num = String::new();
                while let Some(&c) = chars.peek() {
                    if c == '-' || c.is_ascii_digit() {
                        num.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                args.push(Arg::Int(num.parse().map_err(|_| format!("bad number {num}"))?));
            }
            Some(c) => return Err(format!("unexpected character {c:?}")),
            None => return Err("missing value".to_string()),
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(c) => return Err(format!("expected ',' but found {c:?}")),
        }
    }
    Ok(args)
}

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)^agent\.([a-z_]+)\((.*)\)$").expect("valid regex"))
}

/// Parses one `agent.<method>(...)` call. The returned action keeps the
/// call text verbatim in `payload`.
pub fn parse_agent_action(text: &str) -> Result<Action, ActionParseError> {
    let raw = text.trim();
    let raw = raw
        .strip_prefix("```python")
        .or_else(|| raw.strip_prefix("```"))
        .and_then(|r| r.strip_suffix("```"))
        .map(str::trim)
        .unwrap_or(raw);
    let fail = |reason: String| ActionParseError {
        text: raw.to_string(),
        reason,
    };
    let caps = action_regex()
        .captures(raw)
        .ok_or_else(|| fail("expected a single agent.<method>(...) call".to_string()))?;
    let args = split_args(&caps[2]).map_err(fail)?;
    let coord = |a: &Arg| match a {
        Arg::Int(v) if *v >= 0 && *v <= u32::MAX as i64 => Ok(*v as u32),
        other => Err(fail(format!("expected a non-negative coordinate, got {other:?}"))),
    };
    let string = |a: &Arg| match a {
        Arg::Str(s) => Ok(s.clone()),
        other => Err(fail(format!("expected a string, got {other:?}"))),
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(fail(format!("expected {n} arguments, got {}", args.len())))
        }
    };
    let mut action = match &caps[1] {
        "click" => {
            arity(2)?;
            Action::click(coord(&args[0])?, coord(&args[1])?)
        }
        "move_to" => {
            arity(2)?;
            Action::move_to(coord(&args[0])?, coord(&args[1])?)
        }
        "drag_to" => {
            arity(4)?;
            Action::drag_to(
                Point::new(coord(&args[0])?, coord(&args[1])?),
                Point::new(coord(&args[2])?, coord(&args[3])?),
            )
        }
        "type" | "type_text" => {
            arity(1)?;
            Action::type_text(&string(&args[0])?)
        }
        "hotkey" => {
            if args.is_empty() {
                return Err(fail("hotkey needs at least one key".to_string()));
            }
            let keys = args.iter().map(string).collect::<Result<Vec<_>, _>>()?;
            Action::hotkey(&keys.join("+"))
        }
        "scroll" => {
            arity(3)?;
            let clicks = match args[2] {
                Arg::Int(v) => i32::try_from(v).map_err(|_| fail("scroll amount out of range".into()))?,
                _ => return Err(fail("scroll amount must be an integer".to_string())),
            };
            Action::scroll(coord(&args[0])?, coord(&args[1])?, clicks)
        }
        "wait" => {
            arity(1)?;
            Action::wait(coord(&args[0])?)
        }
        "call_code_agent" => match args.as_slice() {
            [] => Action::code_call(None),
            [one] => Action::code_call(Some(&string(one)?)),
            _ => return Err(fail("call_code_agent takes at most one argument".to_string())),
        },
        "done" => {
            arity(0)?;
            Action::done()
        }
        "fail" => {
            arity(0)?;
            Action::fail()
        }
        other => return Err(fail(format!("unknown method {other}"))),
    };
    action.payload = raw.to_string();
    Ok(action)
}

/// One entry of the GUI policy's running context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HistoryEntry {
    Action { step: usize, thoughts: String, action: String },
    Handoff(String),
    Reflection(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    pub fn push(&mut self, entry: HistoryEntry) {
        self.entries.push(entry);
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "No actions have been taken yet.".to_string();
        }
        let mut out = String::new();
        for entry in &self.entries {
            match entry {
                HistoryEntry::Action { step, thoughts, action } => {
                    out.push_str(&format!("Step {}:\nThoughts: {}\nAction: {}\n", step + 1, thoughts, action));
                }
                HistoryEntry::Handoff(text) => {
                    out.push_str(text);
                    out.push('\n');
                }
                HistoryEntry::Reflection(text) => {
                    out.push_str(&format!("Reflection: {text}\n"));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatPolicyConfig {
    pub model_id: String,
    pub current_os: String,
    pub sampling: SamplingParams,
    pub retries: u32,
    /// Queries the reflection prompt before every step.
    pub reflection: bool,
    pub code: CodeAgentConfig,
}

impl Default for FlatPolicyConfig {
    fn default() -> Self {
        FlatPolicyConfig {
            model_id: String::new(),
            current_os: "Ubuntu".to_string(),
            sampling: SamplingParams::default(),
            retries: DEFAULT_RETRIES,
            reflection: false,
            code: CodeAgentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDecision {
    pub action: Action,
    pub thoughts: String,
}

pub const NEXT_ACTION_PROMPT: &str = "What is the next action?";

fn policy_request(
    task: &Task,
    history: &History,
    screenshot: &Screenshot,
    prompts: &PromptSet,
    config: &FlatPolicyConfig,
) -> ChatRequest {
    // The policy prompt uses bare placeholder names, so substitute directly.
    let system = prompts
        .get(prompts::GUI_POLICY)
        .text
        .replace("TASK_DESCRIPTION", &task.instruction)
        .replace("CURRENT_OS", &config.current_os);
    let mut req = ChatRequest::new(&config.model_id, system)
        .text(format!("History:\n{}", history.render()))
        .image(screenshot.image.clone())
        .text(NEXT_ACTION_PROMPT);
    req.sampling = config.sampling;
    req
}

/// One flat-policy step. An unparseable reply after every retry becomes a
/// `Fail` action carrying the diagnostic; an unreachable backend is an error.
pub fn flat_policy_step(
    task: &Task,
    history: &History,
    screenshot: &Screenshot,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    config: &FlatPolicyConfig,
) -> Result<PolicyDecision, BackendError> {
    let request = policy_request(task, history, screenshot, prompts, config);
    let mut last_problem = String::new();
    let mut last_backend_error = None;
    for attempt in 0..=config.retries {
        let reply = match backend.complete(&with_attempt_seed(request.clone(), attempt)) {
            Ok(r) => r,
            Err(e) => {
                last_backend_error = Some(e);
                continue;
            }
        };
        last_backend_error = None;
        match parse_agent_action(answer_text(&reply)) {
            Ok(action) => {
                let thoughts = extract_tag(&reply, "thoughts").unwrap_or_default().to_string();
                return Ok(PolicyDecision { action, thoughts });
            }
            Err(e) => last_problem = e.to_string(),
        }
    }
    if let Some(e) = last_backend_error {
        return Err(e);
    }
    Ok(PolicyDecision {
        action: Action::fail_with(&format!("unusable policy output: {last_problem}")),
        thoughts: String::new(),
    })
}

fn reflection_request(
    task: &Task,
    history: &History,
    screenshot: &Screenshot,
    prompts: &PromptSet,
    config: &FlatPolicyConfig,
) -> ChatRequest {
    let mut req = ChatRequest::new(&config.model_id, prompts.get(prompts::REFLECTION).text.clone())
        .text(format!("Task Description: {}", task.instruction))
        .text(format!("Current Trajectory:\n{}", history.render()))
        .image(screenshot.image.clone());
    req.sampling = config.sampling;
    req
}

/// The baseline policy: stateful history, optional reflection, and code
/// sessions on demand.
pub struct FlatPolicy<B> {
    pub id: String,
    pub backend: B,
    pub prompts: PromptSet,
    pub config: FlatPolicyConfig,
    pub history: History,
}

impl<B: ChatBackend> FlatPolicy<B> {
    pub fn new(id: impl Into<String>, backend: B, prompts: PromptSet, config: FlatPolicyConfig) -> Self {
        FlatPolicy {
            id: id.into(),
            backend,
            prompts,
            config,
            history: History::default(),
        }
    }

    pub fn decide(&mut self, task: &Task, screenshot: &Screenshot, step: usize) -> Result<Action, BackendError> {
        if self.config.reflection && !self.history.entries.is_empty() {
            let req = reflection_request(task, &self.history, screenshot, &self.prompts, &self.config);
            match self.backend.complete(&req) {
                Ok(text) => self.history.push(HistoryEntry::Reflection(answer_text(&text).to_string())),
                Err(e) => tracing::warn!(error = %e, "reflection skipped"),
            }
        }
        let decision = flat_policy_step(task, &self.history, screenshot, &self.backend, &self.prompts, &self.config)?;
        self.history.push(HistoryEntry::Action {
            step,
            thoughts: decision.thoughts,
            action: decision.action.payload.clone(),
        });
        Ok(decision.action)
    }

    /// Runs the code session for a `CodeCall` and appends the hand-off block.
    pub fn delegate(
        &mut self,
        task: &Task,
        subtask: Option<&str>,
        screenshot: &Screenshot,
        executor: &mut dyn CodeExecutor,
    ) -> Result<CodeSessionReport, ExecutorError> {
        let instruction = subtask.unwrap_or(&task.instruction);
        let report = run_code_session(
            instruction,
            screenshot,
            executor,
            &self.backend,
            &self.prompts,
            &self.config.code,
        )?;
        self.history.push(HistoryEntry::Handoff(render_handoff(&report)));
        Ok(report)
    }
}

impl<B: ChatBackend> crate::ensemble::Policy for FlatPolicy<B> {
    fn next_action(&mut self, task: &Task, screenshot: &Screenshot, step: usize) -> Result<Action, RolloutError> {
        self.decide(task, screenshot, step)
            .map_err(|e| RolloutError::Policy(e.to_string()))
    }

    fn run_code(
        &mut self,
        task: &Task,
        subtask: Option<&str>,
        screenshot: &Screenshot,
        executor: &mut dyn CodeExecutor,
    ) -> Result<CodeSessionReport, RolloutError> {
        self.delegate(task, subtask, screenshot, executor)
            .map_err(|e| RolloutError::Env(e.to_string()))
    }
}

/// Builds one [`FlatPolicy`] per candidate, sampling with the candidate's
/// seed and temperature.
pub struct FlatPolicyFactory {
    pub backend: Arc<dyn ChatBackend>,
    pub prompts: PromptSet,
    pub config: FlatPolicyConfig,
}

impl PolicyFactory for FlatPolicyFactory {
    fn create(&self, spec: &CandidateSpec, _task: &Task) -> Result<Box<dyn crate::ensemble::Policy>, RolloutError> {
        let mut config = self.config.clone();
        if !spec.model_id.is_empty() {
            config.model_id = spec.model_id.clone();
            config.code.model_id = spec.model_id.clone();
        }
        config.sampling.seed = Some(spec.seed);
        config.code.sampling.seed = Some(spec.seed);
        if let Some(t) = spec.temperature() {
            config.sampling.temperature = t;
            config.code.sampling.temperature = t;
        }
        Ok(Box::new(FlatPolicy::new(
            spec.policy_id.clone(),
            self.backend.clone(),
            self.prompts.clone(),
            config,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::ActionKind;

    #[test]
    fn parses_every_method() {
        let a = parse_agent_action("agent.click(10, 20)").unwrap();
        assert_eq!((a.kind, a.pointer_start), (ActionKind::Click, Some(Point::new(10, 20))));
        let a = parse_agent_action("agent.drag_to(1,2, 3 ,4)").unwrap();
        assert_eq!(a.pointer_end, Some(Point::new(3, 4)));
        assert_eq!(a.payload, "agent.drag_to(1,2, 3 ,4)");
        let a = parse_agent_action(r#"agent.type("say \"hi\", ok")"#).unwrap();
        assert_eq!(a.text.as_deref(), Some("say \"hi\", ok"));
        let a = parse_agent_action(r#"agent.hotkey("ctrl", 's')"#).unwrap();
        assert_eq!(a.text.as_deref(), Some("ctrl+s"));
        let a = parse_agent_action("agent.scroll(5, 6, -3)").unwrap();
        assert_eq!(a.text.as_deref(), Some("-3"));
        let a = parse_agent_action("agent.call_code_agent()").unwrap();
        assert_eq!((a.kind, a.text.clone()), (ActionKind::CodeCall, None));
        let a = parse_agent_action("agent.call_code_agent(subtask=\"sum column B\")").unwrap();
        assert_eq!(a.text.as_deref(), Some("sum column B"));
        assert_eq!(parse_agent_action("agent.done()").unwrap().kind, ActionKind::Done);
        assert_eq!(parse_agent_action("agent.wait(2)").unwrap().kind, ActionKind::Wait);
    }

    #[test]
    fn rejects_malformed_actions() {
        for bad in [
            "click(1, 2)",
            "agent.click(1)",
            "agent.click(-1, 2)",
            "agent.type(hello)",
            "agent.fly(1, 2)",
            "agent.type(\"open",
            "agent.done(1)",
        ] {
            assert!(parse_agent_action(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn code_answer_grammar() {
        assert_eq!(parse_code_answer("<answer>DONE</answer>").unwrap(), CodeAnswer::Done);
        assert_eq!(parse_code_answer("FAIL").unwrap(), CodeAnswer::Fail);
        let code = parse_code_answer("<thoughts>x</thoughts><answer>\n```bash\nls -l\n```\n</answer>").unwrap();
        assert_eq!(code, CodeAnswer::Code(CodeBlock::bash("ls -l\n")));
        assert!(parse_code_answer("```bash\nls\n```\nDONE").is_err());
        assert!(parse_code_answer("```bash\nls\n```\n```python\nprint(1)\n```").is_err());
        assert!(parse_code_answer("```ruby\nputs 1\n```").is_err());
        assert!(parse_code_answer("I think we are done").is_err());
    }

    #[test]
    fn handoff_is_deterministic_and_complete() {
        let report = CodeSessionReport {
            instruction: "sort the sheet".into(),
            steps_completed: 0,
            max_steps: 20,
            completion_reason: CompletionReason::Fail,
            summary: String::new(),
            history: vec![],
        };
        let a = render_handoff(&report);
        assert_eq!(a, render_handoff(&report));
        for needle in ["sort the sheet", "Steps completed: 0", "Max steps: 20", "FAIL", "Summary:", "Execution history:"] {
            assert!(a.contains(needle), "{needle}");
        }
    }
}
