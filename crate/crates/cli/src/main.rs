use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scaffold_core::config::AgentConfig;
use scaffold_core::harness::{run_suite, two_pass, EvalOptions, Suite};
use scaffold_core::llm::resolve_backend;
use scaffold_core::meta::{improve, synthesize, AgentSpecDraft, CandidateAgent, ImproveOptions};
use scaffold_core::notes::{distill, NoteStore};
use scaffold_core::orchestrator::{replay, run_session, SessionOptions};
use scaffold_core::prompts;
use scaffold_core::trajectory::{Clock, FixedClock, Recorder, SystemClock, Trajectory};

/// Model-agnostic coding agent kernel.
#[derive(Parser)]
#[command(name = "scaffold", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one session. Exit 0 completed, 2 iteration cap, 3 aborted, 1 bad input.
    Run(RunArgs),
    /// Print the user view of a stored trajectory.
    Replay {
        trajectory: PathBuf,
    },
    /// Run a task suite and report resolve rate, turns, token cost and buckets.
    Eval(EvalArgs),
    /// Run a suite twice, distilling notes after the first run and importing them in the second.
    TwoPass(TwoPassArgs),
    /// Distill notes from a finished trajectory into a notes directory.
    Distill(DistillArgs),
    /// Synthesize (or load) an agent config and refine it against a suite.
    Meta(MetaArgs),
}

#[derive(Args)]
struct Common {
    /// Timestamp every event with a fixed time, for reproducible output.
    #[arg(long)]
    fixed_clock: bool,
}

impl Common {
    fn clock(&self) -> Arc<dyn Clock> {
        if self.fixed_clock {
            Arc::new(FixedClock::default())
        } else {
            Arc::new(SystemClock)
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Task prompt text.
    #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    prompt: Option<String>,
    /// Read the task prompt from a file.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Directory for the trajectory and log files.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    session_id: Option<String>,
    /// Do not stream the user view to stdout.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Tasks run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep workdirs, trajectories, logs and report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TwoPassArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Model that writes notes between the runs.
    #[arg(long, default_value = "reference-notes")]
    note_model: String,
    /// Notes root; one subdirectory per task. Temporary when absent.
    #[arg(long)]
    notes_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    trajectory: PathBuf,
    #[arg(long)]
    notes_dir: PathBuf,
    #[arg(long)]
    project: String,
    #[arg(long, default_value = "reference-notes")]
    note_model: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MetaArgs {
    /// Spec form (TOML). Required unless --config is given.
    #[arg(long, required_unless_present = "config")]
    spec: Option<PathBuf>,
    /// Start from this config instead of synthesizing one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    meta_model: String,
    /// Refinement rounds.
    #[arg(long, default_value_t = 3)]
    budget: u32,
    /// Stop once the resolve rate reaches this percentage.
    #[arg(long, default_value_t = 100.0)]
    target: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Writes history.json, report.md and best.toml here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

/// Input errors map to exit code 1.
fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Replay { trajectory } => cmd_replay(&trajectory),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::TwoPass(a) => cmd_two_pass(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Meta(a) => cmd_meta(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<AgentConfig> {
    AgentConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let config = load_config(&a.config)?;
    let (prompt, prompt_file) = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => (p.clone(), None),
        (None, Some(f)) => (fs::read_to_string(f).with_context(|| format!("prompt file {}", f.display()))?, Some(f.display().to_string())),
        (None, None) => bail!("give --prompt or --prompt-file"),
    };
    let options = SessionOptions {
        session_id: a.session_id,
        prompt_file,
        output_dir: Some(a.out.clone()),
        echo: !a.quiet,
        clock: a.common.clock(),
        ..SessionOptions::default()
    };
    let result = run_session(&config, &prompt, options)?;
    eprintln!("trajectory: {}", a.out.join(format!("{}.{}", result.session_id, scaffold_core::trajectory::FILE_EXTENSION)).display());
    if let Some(e) = &result.error {
        eprintln!("session {}: {e}", result.status.as_str());
    } else if result.status.exit_code() != 0 {
        eprintln!("session {} after {} iterations", result.status.as_str(), result.iterations);
    }
    Ok(result.status.exit_code() as u8)
}

fn cmd_replay(path: &Path) -> Result<u8> {
    let traj = Trajectory::load(path).with_context(|| format!("trajectory {}", path.display()))?;
    print!("{}", replay(&traj));
    Ok(0)
}

fn eval_options(a: &EvalArgs) -> EvalOptions {
    EvalOptions { jobs: a.jobs, out_dir: a.out.clone(), clock: a.common.clock(), echo: false }
}

fn write_out(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let config = load_config(&a.config)?;
    let suite = Suite::load(&a.suite)?;
    let report = run_suite(&config, &suite, &eval_options(&a));
    let text = report.render();
    print!("{text}");
    write_out(a.out.as_deref(), "report.json", &serde_json::to_string_pretty(&report)?)?;
    write_out(a.out.as_deref(), "report.md", &text)?;
    Ok(0)
}

fn cmd_two_pass(a: TwoPassArgs) -> Result<u8> {
    let config = load_config(&a.eval.config)?;
    let suite = Suite::load(&a.eval.suite)?;
    let note_backend = resolve_backend(&a.note_model, Path::new("."), None)?;
    let scratch = tempfile::tempdir()?;
    let notes_root = a.notes_dir.clone().unwrap_or_else(|| scratch.path().to_path_buf());
    let report = two_pass(&config, &suite, note_backend.as_ref(), &eval_options(&a.eval), &notes_root);
    let text = report.render();
    print!("{text}");
    write_out(a.eval.out.as_deref(), "two_pass.json", &serde_json::to_string_pretty(&report)?)?;
    write_out(a.eval.out.as_deref(), "two_pass.md", &text)?;
    Ok(0)
}

fn cmd_distill(a: DistillArgs) -> Result<u8> {
    let traj = Trajectory::load(&a.trajectory).with_context(|| format!("trajectory {}", a.trajectory.display()))?;
    let backend = resolve_backend(&a.note_model, Path::new("."), None)?;
    let distilled = distill(&traj, backend.as_ref(), &a.project, prompts::builtin(prompts::NOTE_TAKER).unwrap_or_default(), a.common.clock())?;
    let store = NoteStore::open(&a.notes_dir)?;
    let report = store.persist(&distilled.notes)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for p in &report.written {
        println!("{p}");
    }
    println!("{} notes written to {}", report.written.len(), a.notes_dir.display());
    Ok(0)
}

fn cmd_meta(a: MetaArgs) -> Result<u8> {
    let suite = Suite::load(&a.suite)?;
    let meta = resolve_backend(&a.meta_model, Path::new("."), None)?;
    let clock = a.common.clock();
    let candidate = match (&a.config, &a.spec) {
        (Some(path), _) => CandidateAgent::new(load_config(path)?, 0),
        (None, Some(spec_path)) => {
            let spec = AgentSpecDraft::load(spec_path)?;
            let mut rec = Recorder::new(Trajectory::new("synthesize", "meta"), clock.clone());
            let mut c = synthesize(&spec, meta.as_ref(), &mut rec, 2, prompts::builtin(prompts::META_SYNTHESIZE).unwrap_or_default())?;
            c.config.base_dir = spec_path.parent().map(Path::to_path_buf).unwrap_or_default();
            c
        }
        (None, None) => bail!("give --spec or --config"),
    };
    let opts = EvalOptions { jobs: a.jobs, out_dir: None, clock: clock.clone(), echo: false };
    let evaluate = |c: &CandidateAgent| run_suite(&c.config, &suite, &opts);
    let baseline = evaluate(&candidate);
    let outcome = improve(candidate, &baseline, &evaluate, meta.as_ref(), &ImproveOptions { budget: a.budget, target_rate: a.target, clock })?;
    let text = outcome.render();
    print!("{text}");
    write_out(a.out.as_deref(), "history.json", &serde_json::to_string_pretty(&outcome)?)?;
    write_out(a.out.as_deref(), "report.md", &text)?;
    write_out(a.out.as_deref(), "best.toml", &outcome.best.to_toml_string())?;
    Ok(0)
}
