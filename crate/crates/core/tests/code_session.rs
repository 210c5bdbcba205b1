use std::sync::Mutex;
use std::time::Duration;

use image::RgbImage;
use widescale::agent::{
    render_handoff, run_code_session, CodeAgentConfig, CodeBlock, CodeExecutor, CodeLanguage, CompletionReason,
    ExecFeedback, ExecStatus, ExecutorError, SandboxExecutor, CODE_STEP_HEADER, HANDOFF_HEADER,
};
use widescale::prompts::{self, PromptSet};
use widescale::trajectory::Screenshot;
use widescale::vlm::{ChatRequest, FnBackend};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Ending {
    Done(u32),
    Fail(u32),
    Never,
}

/// Echoes its step index; remembers every block it ran.
#[derive(Default)]
struct EchoExecutor {
    ran: Vec<(u32, String)>,
}

impl CodeExecutor for EchoExecutor {
    fn run(&mut self, block: &CodeBlock, step_index: u32) -> Result<ExecFeedback, ExecutorError> {
        self.ran.push((step_index, block.code.clone()));
        Ok(ExecFeedback {
            status: ExecStatus::Ok,
            return_code: 0,
            stdout: format!("out-{step_index}"),
            stderr: String::new(),
            step_index,
        })
    }
}

fn screenshot() -> Screenshot {
    Screenshot::new(RgbImage::new(8, 8), 0, 0)
}

/// Runs a session whose generator emits `echo k` at turn k until `ending`.
fn session(budget: u32, ending: Ending) -> (widescale::agent::CodeSessionReport, Vec<ChatRequest>, EchoExecutor) {
    let prompts = PromptSet::builtin();
    let summarizer = prompts.get(prompts::CODE_SUMMARIZER).text.clone();
    let seen = Mutex::new(Vec::new());
    let backend = FnBackend(|req: &ChatRequest| {
        if req.system == summarizer {
            return Ok("<answer>summary text</answer>".to_string());
        }
        seen.lock().unwrap().push(req.clone());
        let k = seen.lock().unwrap().len() as u32;
        Ok(match ending {
            Ending::Done(d) if d == k => "<thoughts>ok</thoughts><answer>DONE</answer>".to_string(),
            Ending::Fail(f) if f == k => "<thoughts>stuck</thoughts><answer>FAIL</answer>".to_string(),
            _ => format!("<thoughts>go</thoughts><answer>```bash\necho {k}\n```</answer>"),
        })
    });
    let config = CodeAgentConfig {
        budget,
        ..CodeAgentConfig::default()
    };
    let mut exec = EchoExecutor::default();
    let report = run_code_session("sum column B", &screenshot(), &mut exec, &backend, &prompts, &config).unwrap();
    (report, seen.into_inner().unwrap(), exec)
}

fn feedback_steps(req: &ChatRequest) -> Vec<u32> {
    req.parts
        .iter()
        .filter_map(|p| p.as_text())
        .filter_map(|t| t.strip_prefix(CODE_STEP_HEADER))
        .map(|rest| rest.trim_start().split(' ').next().unwrap().parse().unwrap())
        .collect()
}

fn check(budget: u32, ending: Ending) {
    let (report, requests, exec) = session(budget, ending);
    let (reason, completed, executed) = match ending {
        Ending::Done(k) => (CompletionReason::Done, k, k - 1),
        Ending::Fail(k) => (CompletionReason::Fail, k, k - 1),
        Ending::Never => (CompletionReason::BudgetExhausted, budget, budget),
    };
    let ctx = format!("budget {budget}, {ending:?}");
    assert_eq!(report.completion_reason, reason, "{ctx}");
    assert_eq!(report.steps_completed, completed, "{ctx}");
    assert_eq!(report.max_steps, budget, "{ctx}");
    assert_eq!(report.history.len() as u32, executed, "{ctx}");
    assert!(report.violations().is_empty(), "{ctx}: {:?}", report.violations());
    assert_eq!(requests.len() as u32, completed, "{ctx}: one generator turn per completed step");
    let ran: Vec<u32> = exec.ran.iter().map(|(k, _)| *k).collect();
    assert_eq!(ran, (1..=executed).collect::<Vec<_>>(), "{ctx}");
    for (i, step) in report.history.iter().enumerate() {
        let k = i as u32 + 1;
        assert_eq!(step.feedback.step_index, k);
        assert_eq!(step.block.code.trim(), format!("echo {k}"));
        assert_eq!(step.feedback.stdout, format!("out-{k}"));
    }
    // Turn k sees exactly F_1..F_{k-1}, in order.
    for (i, req) in requests.iter().enumerate() {
        let k = i as u32 + 1;
        assert_eq!(feedback_steps(req), (1..k).collect::<Vec<_>>(), "{ctx}, turn {k}");
    }
    let handoff = render_handoff(&report);
    assert!(handoff.starts_with(HANDOFF_HEADER));
    for needle in [
        "Task: sum column B".to_string(),
        format!("Steps completed: {completed}"),
        format!("Max steps: {budget}"),
        format!("Completion reason: {reason}"),
        "summary text".to_string(),
    ] {
        assert!(handoff.contains(&needle), "{ctx}: handoff lacks {needle:?}");
    }
    for k in 1..=executed {
        assert!(handoff.contains(&format!("echo {k}")) && handoff.contains(&format!("out-{k}")), "{ctx}");
    }
}

#[test]
fn every_ending_at_every_step() {
    for budget in 1..=6 {
        for k in 1..=budget {
            check(budget, Ending::Done(k));
            check(budget, Ending::Fail(k));
        }
        check(budget, Ending::Never);
    }
}

#[test]
fn unusable_generator_fails_with_partial_history() {
    let prompts = PromptSet::builtin();
    let turns = Mutex::new(0u32);
    let backend = FnBackend(|_: &ChatRequest| {
        let mut t = turns.lock().unwrap();
        *t += 1;
        Ok(if *t == 1 { "<answer>```bash\necho 1\n```</answer>".to_string() } else { "no answer here".to_string() })
    });
    let mut exec = EchoExecutor::default();
    let config = CodeAgentConfig {
        budget: 5,
        retries: 1,
        ..CodeAgentConfig::default()
    };
    let report = run_code_session("t", &screenshot(), &mut exec, &backend, &prompts, &config).unwrap();
    assert_eq!(report.completion_reason, CompletionReason::Fail);
    assert_eq!(report.history.len(), 1);
    assert_eq!(report.steps_completed, 1);
}

#[test]
fn sandbox_runs_bash_and_reports_errors() {
    let mut sandbox = SandboxExecutor::default();
    let ok = sandbox.run(&CodeBlock::bash("echo hello; echo warn >&2"), 1).unwrap();
    assert_eq!((ok.status, ok.return_code), (ExecStatus::Ok, 0));
    assert_eq!(ok.stdout.trim(), "hello");
    assert_eq!(ok.stderr.trim(), "warn");
    let err = sandbox.run(&CodeBlock::bash("exit 3"), 2).unwrap();
    assert_eq!((err.status, err.return_code, err.step_index), (ExecStatus::Error, 3, 2));
}

#[test]
fn sandbox_is_stateless_and_jailed() {
    let mut sandbox = SandboxExecutor::default();
    let first = sandbox.run(&CodeBlock::bash("touch marker; export X=1; pwd"), 1).unwrap();
    let second = sandbox.run(&CodeBlock::bash("test -e marker && echo leaked; echo \"x=$X\"; pwd"), 2).unwrap();
    assert!(!second.stdout.contains("leaked"), "file from step 1 leaked into step 2");
    assert!(second.stdout.contains("x=\n"), "{}", second.stdout);
    assert_ne!(first.stdout.trim(), second.stdout.lines().last().unwrap().trim(), "both steps ran in one directory");
}

#[test]
fn sandbox_kills_on_timeout() {
    let mut sandbox = SandboxExecutor::with_timeout(Duration::from_millis(300));
    let started = std::time::Instant::now();
    let fb = sandbox.run(&CodeBlock::bash("sleep 5"), 1).unwrap();
    assert_eq!(fb.status, ExecStatus::Timeout);
    assert!(started.elapsed() < Duration::from_secs(4));
}

#[test]
fn sandbox_runs_python_when_available() {
    let mut sandbox = SandboxExecutor::default();
    let block = CodeBlock {
        language: CodeLanguage::Python,
        code: "print(6 * 7)".to_string(),
    };
    match sandbox.run(&block, 1) {
        Ok(fb) => assert_eq!(fb.stdout.trim(), "42"),
        Err(ExecutorError::Unavailable(_)) => {}
    }
}
