//! Desk-scale evaluation harness.
//!
//! A suite is a TOML file listing tasks; each task runs one session in a
//! fresh copy of its fixture directory and is resolved when its checker
//! command exits 0 there. See `docs/suite-format.md`.
//!
//! Reports keep only per-task rows; every aggregate is computed from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::codec::OutcomeStatus;
use crate::config::AgentConfig;
use crate::llm::{resolve_backend, Backend};
use crate::notes::{distill, NoteStore};
use crate::orchestrator::{run_session_with, SessionOptions, SessionStatus};
use crate::prompts;
use crate::trajectory::{Clock, EventKind, SystemClock, Trajectory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read suite {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("suite parse error: {0}")]
    Parse(String),
    #[error("invalid suite: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    /// Directory copied into the task's fresh workdir.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub prompt_file: Option<PathBuf>,
    /// Shell command run in the workdir after the session; exit 0 resolves.
    /// Without a checker a task resolves when its session completes.
    #[serde(default)]
    pub checker: Option<String>,
    /// Script for the bare `scripted` model_ref.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Notes project; defaults to the suite name.
    #[serde(default)]
    pub project: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    #[serde(default = "default_suite_name")]
    pub name: String,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_suite_name() -> String {
    "suite".into()
}

impl Suite {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut suite: Suite = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        suite.base_dir = base_dir.to_path_buf();
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if t.id.is_empty() || !t.id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.')) {
                return Err(HarnessError::Invalid(format!("task id `{}` must be non-empty and use [A-Za-z0-9_.-]", t.id)));
            }
            if !seen.insert(&t.id) {
                return Err(HarnessError::Invalid(format!("task id `{}` is listed twice", t.id)));
            }
            if t.prompt.is_some() == t.prompt_file.is_some() {
                return Err(HarnessError::Invalid(format!("task `{}` needs exactly one of prompt and prompt_file", t.id)));
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn project_of(&self, task: &TaskSpec) -> String {
        task.project.clone().unwrap_or_else(|| self.name.clone())
    }
}

/// Why an unresolved task failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    IterCapped,
    CheckerFailed,
    Aborted,
}

impl FailureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::IterCapped => "iter_capped",
            FailureClass::CheckerFailed => "checker_failed",
            FailureClass::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub resolved: bool,
    pub status: String,
    pub iterations: u32,
    pub token_cost: u64,
    pub edited_files: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_class: Option<FailureClass>,
    /// Last error observation the agent saw, for triage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One task's row and, when the session ran, its trajectory.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub row: TaskRow,
    pub trajectory: Option<Trajectory>,
}

/// Resolve rate in percent to one decimal: `round(1000·r/t) / 10`.
pub fn resolve_rate(resolved: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| (1000.0 * resolved as f64 / total as f64).round() / 10.0)
}

pub fn format_rate(rate: Option<f64>) -> String {
    rate.map_or_else(|| "n/a".into(), |r| format!("{r:.1}"))
}

pub const NO_EDIT_BUCKET: &str = "0 files";
pub const BUCKETS: [&str; 5] = ["1–2 files", "3–4 files", "5–6 files", "7–10 files", "10+ files"];

/// Bucket label for a task that edited `count` files.
pub fn bucket_edited_files(count: usize) -> &'static str {
    match count {
        0 => NO_EDIT_BUCKET,
        1..=2 => BUCKETS[0],
        3..=4 => BUCKETS[1],
        5..=6 => BUCKETS[2],
        7..=10 => BUCKETS[3],
        _ => BUCKETS[4],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketRow {
    pub label: &'static str,
    pub total: usize,
    pub resolved: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TaskRow>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn resolved(&self) -> usize {
        self.rows.iter().filter(|r| r.resolved).count()
    }

    pub fn rate(&self) -> Option<f64> {
        resolve_rate(self.resolved(), self.total())
    }

    fn mean(&self, f: impl Fn(&TaskRow) -> f64) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn avg_iterations(&self) -> Option<f64> {
        self.mean(|r| r.iterations as f64)
    }

    pub fn avg_token_cost(&self) -> Option<f64> {
        self.mean(|r| r.token_cost as f64)
    }

    /// Rows restricted to `ids`, in report order.
    pub fn subset(&self, ids: &[String]) -> EvalReport {
        EvalReport { rows: self.rows.iter().filter(|r| ids.contains(&r.task_id)).cloned().collect() }
    }

    /// Bucket table; the no-edit row comes last.
    pub fn buckets(&self) -> Vec<BucketRow> {
        BUCKETS
            .iter()
            .chain(std::iter::once(&NO_EDIT_BUCKET))
            .map(|&label| {
                let rows: Vec<&TaskRow> = self.rows.iter().filter(|r| bucket_edited_files(r.edited_files) == label).collect();
                BucketRow { label, total: rows.len(), resolved: rows.iter().filter(|r| r.resolved).count() }
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("| Task | Resolved | Status | Turns | Token Cost | Edited Files | Failure |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.task_id,
                if r.resolved { "yes" } else { "no" },
                r.status,
                r.iterations,
                r.token_cost,
                r.edited_files,
                r.failure_class.map_or("", FailureClass::as_str)
            );
        }
        let _ = writeln!(
            out,
            "\nResolve rate: {} ({} of {})\nAvg. turns: {}\nAvg. token cost: {}\n",
            format_rate(self.rate()),
            self.resolved(),
            self.total(),
            self.avg_iterations().map_or("n/a".into(), fmt_number),
            self.avg_token_cost().map_or("n/a".into(), fmt_tokens)
        );
        out.push_str("| Edited files | Tasks | Resolved | Resolve rate |\n|---|---|---|---|\n");
        for b in self.buckets() {
            let label = if b.label == NO_EDIT_BUCKET { format!("{}*", b.label) } else { b.label.to_string() };
            let _ = writeln!(out, "| {label} | {} | {} | {} |", b.total, b.resolved, format_rate(resolve_rate(b.resolved, b.total)));
        }
        out.push_str("\n\\* Tasks that edited no files; kept apart from the edited-file buckets.\n");
        out
    }
}

/// Integer when whole, else one decimal.
pub fn fmt_number(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Token counts of 1000 and above in thousands: `104k`.
pub fn fmt_tokens(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{}k", (v / 1000.0).round() as i64)
    } else {
        fmt_number(v)
    }
}

fn signed(s: String) -> String {
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

pub const TWO_PASS_HEADER: &str = "| Trial | Avg. Turns (↓) | Avg. Token Cost (↓) | Resolve Rate (Pass@1, ↑) |";

/// Paired averages of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSummary {
    pub turns: f64,
    pub token_cost: f64,
    pub rate: f64,
}

impl TrialSummary {
    pub fn of(report: &EvalReport) -> Option<Self> {
        Some(Self { turns: report.avg_iterations()?, token_cost: report.avg_token_cost()?, rate: report.rate()? })
    }
}

/// The two-trial comparison table with deltas against the first trial.
pub fn render_two_pass_table(run1: &TrialSummary, run2: &TrialSummary) -> String {
    let d_turns = signed(fmt_number(run2.turns - run1.turns));
    let d_tokens = signed(fmt_tokens(run2.token_cost - run1.token_cost));
    let d_rate = signed(format!("{:.1}", run2.rate - run1.rate));
    format!(
        "{TWO_PASS_HEADER}\n|---|---|---|---|\n| Run 1 | {} | {} | {:.1} |\n| Run 2 | {} ({d_turns}) | {} ({d_tokens}) | {:.1} ({d_rate}) |\n",
        fmt_number(run1.turns),
        fmt_tokens(run1.token_cost),
        run1.rate,
        fmt_number(run2.turns),
        fmt_tokens(run2.token_cost),
        run2.rate
    )
}

pub struct EvalOptions {
    pub jobs: usize,
    /// Keeps workdirs, trajectories and logs; temporary when absent.
    pub out_dir: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub echo: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { jobs: 1, out_dir: None, clock: Arc::new(SystemClock), echo: false }
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in WalkDir::new(from) {
        let entry = entry?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest)?;
        } else {
            fs::copy(entry.path(), &dest)?;
        }
    }
    Ok(())
}

fn last_error(trajectory: &Trajectory) -> Option<String> {
    trajectory
        .of_kind(EventKind::ActionExecuted)
        .filter(|e| {
            serde_json::from_value::<OutcomeStatus>(e.payload.get("status").cloned().unwrap_or_default())
                .is_ok_and(|s| s != OutcomeStatus::Success)
        })
        .last()
        .map(|e| e.str_field("agent_text").lines().next().unwrap_or("").to_string())
}

fn failed_row(task: &TaskSpec, error: String) -> TaskRun {
    TaskRun {
        row: TaskRow {
            task_id: task.id.clone(),
            resolved: false,
            status: "aborted".into(),
            iterations: 0,
            token_cost: 0,
            edited_files: 0,
            failure_class: Some(FailureClass::Aborted),
            last_error: None,
            error: Some(error),
        },
        trajectory: None,
    }
}

/// Run one task in a fresh workdir. `notes_dir` enables note import.
pub fn run_task(config: &AgentConfig, suite: &Suite, task: &TaskSpec, notes_dir: Option<&Path>, opts: &EvalOptions, label: &str) -> TaskRun {
    let scratch;
    let work_root = match opts.out_dir.as_deref().map(std::path::absolute) {
        Some(Ok(d)) => d.join(label).join(&task.id),
        Some(Err(e)) => return failed_row(task, format!("out dir: {e}")),
        None => match tempfile::tempdir() {
            Ok(t) => {
                scratch = t;
                scratch.path().to_path_buf()
            }
            Err(e) => return failed_row(task, format!("workdir: {e}")),
        },
    };
    let workdir = work_root.join("work");
    if workdir.exists() {
        if let Err(e) = fs::remove_dir_all(&workdir) {
            return failed_row(task, format!("workdir: {e}"));
        }
    }
    if let Err(e) = fs::create_dir_all(&workdir) {
        return failed_row(task, format!("workdir: {e}"));
    }
    if let Some(fixture) = &task.fixture {
        if let Err(e) = copy_dir(&suite.resolve(fixture), &workdir) {
            return failed_row(task, format!("fixture {}: {e}", fixture.display()));
        }
    }
    let (prompt, prompt_file) = match (&task.prompt, &task.prompt_file) {
        (Some(p), _) => (p.clone(), None),
        (None, Some(f)) => match fs::read_to_string(suite.resolve(f)) {
            Ok(p) => (p, Some(f.display().to_string())),
            Err(e) => return failed_row(task, format!("prompt_file {}: {e}", f.display())),
        },
        (None, None) => return failed_row(task, "task has no prompt".into()),
    };

    let mut cfg = config.clone();
    cfg.workdir = workdir.clone();
    cfg.enabled_extensions.retain(|e| e != "notes");
    cfg.notes_dir = None;
    if let Some(dir) = notes_dir {
        cfg.notes_dir = Some(std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf()));
        cfg.enabled_extensions.push("notes".into());
    }
    let script = task.script.as_ref().map(|s| suite.resolve(s));
    let backend: Arc<dyn Backend> = match resolve_backend(&cfg.model_ref, &cfg.base_dir, script.as_deref()) {
        Ok(b) => b,
        Err(e) => return failed_row(task, e.to_string()),
    };
    let options = SessionOptions {
        session_id: Some(format!("{label}-{}", task.id)),
        prompt_file,
        output_dir: opts.out_dir.as_ref().map(|_| work_root.clone()),
        echo: opts.echo,
        clock: opts.clock.clone(),
        ..SessionOptions::default()
    };
    let result = match run_session_with(&cfg, &prompt, backend, options) {
        Ok(r) => r,
        Err(e) => return failed_row(task, e.to_string()),
    };
    let checker_ok = match &task.checker {
        Some(cmd) => Command::new("sh").arg("-c").arg(cmd).current_dir(&workdir).output().is_ok_and(|o| o.status.success()),
        None => result.status == SessionStatus::Completed,
    };
    let failure_class = (!checker_ok).then(|| match result.status {
        SessionStatus::Aborted => FailureClass::Aborted,
        SessionStatus::IterCapped => FailureClass::IterCapped,
        SessionStatus::Completed => FailureClass::CheckerFailed,
    });
    TaskRun {
        row: TaskRow {
            task_id: task.id.clone(),
            resolved: checker_ok,
            status: result.status.as_str().into(),
            iterations: result.iterations,
            token_cost: result.token_cost,
            edited_files: result.edited_files.len(),
            failure_class,
            last_error: last_error(&result.trajectory),
            error: result.error.clone(),
        },
        trajectory: Some(result.trajectory),
    }
}

fn run_all(config: &AgentConfig, suite: &Suite, tasks: &[&TaskSpec], notes: &(dyn Fn(&TaskSpec) -> Option<PathBuf> + Sync), opts: &EvalOptions, label: &str) -> Vec<TaskRun> {
    let work = |t: &&TaskSpec| run_task(config, suite, t, notes(t).as_deref(), opts, label);
    match rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build() {
        Ok(pool) => pool.install(|| tasks.par_iter().map(work).collect()),
        Err(_) => tasks.iter().map(work).collect(),
    }
}

/// Run every task; rows come back in suite order.
pub fn run_suite_detailed(config: &AgentConfig, suite: &Suite, opts: &EvalOptions) -> Vec<TaskRun> {
    let tasks: Vec<&TaskSpec> = suite.tasks.iter().collect();
    run_all(config, suite, &tasks, &|_| None, opts, "eval")
}

pub fn run_suite(config: &AgentConfig, suite: &Suite, opts: &EvalOptions) -> EvalReport {
    EvalReport { rows: run_suite_detailed(config, suite, opts).into_iter().map(|r| r.row).collect() }
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoPassReport {
    pub run1: EvalReport,
    pub run2: EvalReport,
    /// Tasks that produced no notes and were left out of Run 2.
    pub excluded: Vec<String>,
    pub notes_written: usize,
    pub warnings: Vec<String>,
}

impl TwoPassReport {
    /// Run 1 restricted to the tasks that also ran in Run 2.
    pub fn paired_run1(&self) -> EvalReport {
        let ids: Vec<String> = self.run2.rows.iter().map(|r| r.task_id.clone()).collect();
        self.run1.subset(&ids)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Run 1: {} tasks, {} notes written. Run 2: {} tasks with notes, {} excluded for producing no notes.\n",
            self.run1.total(),
            self.notes_written,
            self.run2.total(),
            self.excluded.len()
        );
        match (TrialSummary::of(&self.paired_run1()), TrialSummary::of(&self.run2)) {
            (Some(a), Some(b)) => out.push_str(&render_two_pass_table(&a, &b)),
            _ => {
                let _ = writeln!(out, "{TWO_PASS_HEADER}\n|---|---|---|---|\n| Run 1 | n/a | n/a | n/a |\n| Run 2 | n/a | n/a | n/a |");
            }
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "\nExcluded: {}", self.excluded.join(", "));
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Run 1 from scratch, distill notes per task, then Run 2 with each task's
/// notes imported.
pub fn two_pass(config: &AgentConfig, suite: &Suite, note_backend: &dyn Backend, opts: &EvalOptions, notes_root: &Path) -> TwoPassReport {
    let tasks: Vec<&TaskSpec> = suite.tasks.iter().collect();
    let run1 = run_all(config, suite, &tasks, &|_| None, opts, "run1");
    let template = config.template(prompts::NOTE_TAKER);
    let mut with_notes = Vec::new();
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();
    let mut notes_written = 0;
    for (task, run) in tasks.iter().zip(&run1) {
        let Some(traj) = &run.trajectory else {
            excluded.push(task.id.clone());
            continue;
        };
        let dir = notes_root.join(&task.id);
        let outcome = distill(traj, note_backend, &suite.project_of(task), template, opts.clock.clone())
            .map_err(|e| e.to_string())
            .and_then(|d| {
                for w in d.trajectory.of_kind(EventKind::Warning) {
                    warnings.push(format!("{}: {}", task.id, w.str_field("message")));
                }
                if d.notes.is_empty() {
                    return Ok(0);
                }
                let store = NoteStore::open(&dir).map_err(|e| e.to_string())?;
                let report = store.persist(&d.notes).map_err(|e| e.to_string())?;
                warnings.extend(report.warnings.iter().map(|w| format!("{}: {w}", task.id)));
                Ok(report.written.len())
            });
        match outcome {
            Ok(0) => excluded.push(task.id.clone()),
            Ok(n) => {
                notes_written += n;
                with_notes.push(*task);
            }
            Err(e) => {
                warnings.push(format!("{}: distillation failed: {e}", task.id));
                excluded.push(task.id.clone());
            }
        }
    }
    let notes_for = |t: &TaskSpec| Some(notes_root.join(&t.id));
    let run2 = run_all(config, suite, &with_notes, &notes_for, opts, "run2");
    TwoPassReport {
        run1: EvalReport { rows: run1.into_iter().map(|r| r.row).collect() },
        run2: EvalReport { rows: run2.into_iter().map(|r| r.row).collect() },
        excluded,
        notes_written,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: &str, resolved: bool, iterations: u32, tokens: u64, edited: usize) -> TaskRow {
        TaskRow {
            task_id: id.into(),
            resolved,
            status: "completed".into(),
            iterations,
            token_cost: tokens,
            edited_files: edited,
            failure_class: (!resolved).then_some(FailureClass::CheckerFailed),
            last_error: None,
            error: None,
        }
    }

    #[test]
    fn bucket_boundaries() {
        let expect = [
            (0, "0 files"),
            (1, "1–2 files"),
            (2, "1–2 files"),
            (3, "3–4 files"),
            (4, "3–4 files"),
            (5, "5–6 files"),
            (6, "5–6 files"),
            (7, "7–10 files"),
            (10, "7–10 files"),
            (11, "10+ files"),
            (400, "10+ files"),
        ];
        for (n, label) in expect {
            assert_eq!(bucket_edited_files(n), label, "{n}");
        }
    }

    #[test]
    fn rate_arithmetic() {
        assert_eq!(resolve_rate(170, 294), Some(57.8));
        assert_eq!(format_rate(resolve_rate(2, 3)), "66.7");
        assert_eq!(format_rate(resolve_rate(0, 0)), "n/a");
        assert_eq!(EvalReport::default().rate(), None);
    }

    #[test]
    fn two_pass_table_formatting() {
        let a = TrialSummary { turns: 64.0, token_cost: 104_000.0, rate: 53.0 };
        let b = TrialSummary { turns: 61.0, token_cost: 93_000.0, rate: 54.4 };
        let t = render_two_pass_table(&a, &b);
        assert!(t.starts_with(TWO_PASS_HEADER));
        assert!(t.contains("| Run 1 | 64 | 104k | 53.0 |"));
        assert!(t.contains("| Run 2 | 61 (-3) | 93k (-11k) | 54.4 (+1.4) |"));
    }

    #[test]
    fn bucket_table_counts() {
        let r = EvalReport { rows: vec![row("a", true, 1, 1, 1), row("b", false, 1, 1, 2), row("c", true, 1, 1, 11), row("d", false, 1, 1, 0)] };
        let b = r.buckets();
        assert_eq!(b[0], BucketRow { label: "1–2 files", total: 2, resolved: 1 });
        assert_eq!(b[4], BucketRow { label: "10+ files", total: 1, resolved: 1 });
        assert_eq!(b[5], BucketRow { label: "0 files", total: 1, resolved: 0 });
        assert!(r.render().contains("| 0 files* | 1 | 0 | 0.0 |"));
    }

    #[test]
    fn suite_validation() {
        let ok = "name = \"s\"\n[[tasks]]\nid = \"t1\"\nprompt = \"x\"\n";
        assert_eq!(Suite::from_toml_str(ok, Path::new(".")).unwrap().tasks.len(), 1);
        let dup = format!("{ok}[[tasks]]\nid = \"t1\"\nprompt = \"y\"\n");
        assert!(matches!(Suite::from_toml_str(&dup, Path::new(".")), Err(HarnessError::Invalid(_))));
        let both = "[[tasks]]\nid = \"t\"\nprompt = \"x\"\nprompt_file = \"p.md\"\n";
        assert!(matches!(Suite::from_toml_str(both, Path::new(".")), Err(HarnessError::Invalid(_))));
        assert!(matches!(Suite::from_toml_str("[[tasks]]\nid = \"t\"\nprompt = \"x\"\ncolour = 1\n", Path::new(".")), Err(HarnessError::Parse(_))));
    }

    proptest! {
        #[test]
        fn aggregates_recompute_from_rows(rows in proptest::collection::vec((any::<bool>(), 1u32..100, 0u64..200_000, 0usize..20), 0..40)) {
            let report = EvalReport {
                rows: rows.iter().enumerate().map(|(i, (res, it, tok, ed))| row(&format!("t{i}"), *res, *it, *tok, *ed)).collect(),
            };
            let n = rows.len();
            let r = rows.iter().filter(|x| x.0).count();
            prop_assert_eq!(report.rate(), resolve_rate(r, n));
            let bucket_total: usize = report.buckets().iter().map(|b| b.total).sum();
            prop_assert_eq!(bucket_total, n);
            let bucket_resolved: usize = report.buckets().iter().map(|b| b.resolved).sum();
            prop_assert_eq!(bucket_resolved, r);
            if n > 0 {
                let avg = rows.iter().map(|x| x.1 as f64).sum::<f64>() / n as f64;
                prop_assert!((report.avg_iterations().unwrap() - avg).abs() < 1e-9);
            }
            let json = serde_json::to_string(&report).unwrap();
            let back: EvalReport = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, report);
        }
    }
}
