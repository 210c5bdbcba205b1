//! Argument parsing and dispatch.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use widescale::experiment::Report;

use crate::backend::BackendSpec;
use crate::commands::{cmd_evaluate, cmd_narrate, cmd_rollout, cmd_select, Context};
use crate::config;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "widescale", version, about = "Generate, describe and select among parallel agent rollouts")]
pub struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set judge.citing=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// live | mock[:oracle|first|random:SEED|keyword] | replay:PATH | record:PATH
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[command(flatten)]
    pub keys: KeyFlags,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Shorthands for common config keys.
#[derive(Debug, Default, Args)]
pub struct KeyFlags {
    /// `seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `paths.tasks`
    #[arg(long, global = true)]
    pub tasks: Option<PathBuf>,
    /// `paths.rollouts`
    #[arg(long, global = true)]
    pub rollouts: Option<PathBuf>,
    /// `paths.output`
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// `paths.prompts`
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    /// `n`
    #[arg(short = 'n', long = "candidates", global = true)]
    pub n: Option<usize>,
    /// `representation` (narrative, captions, screenshots)
    #[arg(long, global = true)]
    pub representation: Option<String>,
    /// `judge.strategies`, comma separated (mcq, iterative, independent)
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// `judge.citing`
    #[arg(long, global = true)]
    pub citing: Option<bool>,
    /// `budgets.workers`
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

impl KeyFlags {
    fn overrides(&self) -> Vec<String> {
        let path = |p: &PathBuf| toml::Value::String(p.display().to_string()).to_string();
        let text = |s: &str| toml::Value::String(s.to_string()).to_string();
        let mut out = Vec::new();
        if let Some(v) = self.seed {
            out.push(format!("seed={v}"));
        }
        if let Some(p) = &self.tasks {
            out.push(format!("paths.tasks={}", path(p)));
        }
        if let Some(p) = &self.rollouts {
            out.push(format!("paths.rollouts={}", path(p)));
        }
        if let Some(p) = &self.output {
            out.push(format!("paths.output={}", path(p)));
        }
        if let Some(p) = &self.prompts {
            out.push(format!("paths.prompts={}", path(p)));
        }
        if let Some(v) = self.n {
            out.push(format!("n={v}"));
        }
        if let Some(v) = &self.representation {
            out.push(format!("representation={}", text(v)));
        }
        if let Some(v) = &self.strategy {
            let list: Vec<String> = v.split(',').map(|s| text(s.trim())).collect();
            out.push(format!("judge.strategies=[{}]", list.join(", ")));
        }
        if let Some(v) = self.citing {
            out.push(format!("judge.citing={v}"));
        }
        if let Some(v) = self.workers {
            out.push(format!("budgets.workers={v}"));
        }
        out
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the agent mixture and write one directory per rollout.
    Rollout,
    /// Write narratives (or captions / screenshot samples) for task directories.
    Narrate {
        /// Task directories; every selected task under the rollouts root when empty.
        dirs: Vec<PathBuf>,
        /// Also write the augmented frames under `augmented/` in each rollout.
        #[arg(long)]
        dump_augmented: bool,
    },
    /// Judge the candidates of task directories and write `selection.json`.
    Select {
        dirs: Vec<PathBuf>,
    },
    /// Run the full sweep and write `report.tsv` and `records.jsonl`.
    Evaluate,
    /// `evaluate` on the bundled simulator task pack.
    Simbench,
    /// Render a records file as an SVG chart of success rate against N.
    Chart {
        /// `records.jsonl`; defaults to the one in the output directory.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Defaults to `sr_by_n.svg` next to the records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn load_context(cli: &Cli) -> Result<Context, CliError> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.keys.overrides());
    if matches!(cli.command, Command::Simbench) {
        overrides.retain(|o| !o.trim_start().starts_with("paths.tasks"));
    }
    let mut config = config::load(cli.config.as_deref(), &overrides)?;
    if matches!(cli.command, Command::Simbench) {
        config.paths.tasks = None;
    }
    let backend = cli.backend.as_deref().map(str::parse::<BackendSpec>).transpose()?;
    Context::new(config, backend)
}

fn print_report(report: &Report) {
    print!("{}", report.to_tsv());
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Chart { records, out } = &cli.command {
        let config = config::load(cli.config.as_deref(), &cli.overrides)?;
        let records_path = records
            .clone()
            .unwrap_or_else(|| config.paths.output.join(widescale::experiment::RECORDS_FILE));
        let records = Report::read_records(&records_path).map_err(|e| CliError::data(records_path.display(), e))?;
        let out = out
            .clone()
            .unwrap_or_else(|| records_path.with_file_name("sr_by_n.svg"));
        fs::write(&out, crate::chart::render_svg(&records)).map_err(|e| CliError::data(out.display(), e))?;
        println!("{}", out.display());
        return Ok(());
    }
    let ctx = load_context(cli)?;
    match &cli.command {
        Command::Rollout => {
            for dir in cmd_rollout(&ctx)? {
                println!("{}", dir.display());
            }
        }
        Command::Narrate { dirs, dump_augmented } => {
            for path in cmd_narrate(&ctx, dirs, *dump_augmented)? {
                println!("{}", path.display());
            }
        }
        Command::Select { dirs } => {
            for (_, file) in cmd_select(&ctx, dirs)? {
                println!(
                    "{}\t{}\t{}{}",
                    file.task_id,
                    file.selection.chosen_index,
                    file.chosen_rollout,
                    if file.selection.fallback { "\tfallback" } else { "" }
                );
            }
        }
        Command::Evaluate | Command::Simbench => {
            let (report, tsv, records) = cmd_evaluate(&ctx)?;
            print_report(&report);
            eprintln!("wrote {} and {}", tsv.display(), records.display());
        }
        Command::Chart { .. } => unreachable!("handled above"),
    }
    Ok(())
}
