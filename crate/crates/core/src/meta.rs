//! Build-test-improve loop.
//!
//! [`synthesize`] turns a spec form into a first candidate. [`improve`]
//! evaluates, shows the failures to a meta model, applies the patches it
//! proposes and evaluates again, keeping the best version seen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog;
use crate::config::AgentConfig;
use crate::harness::{format_rate, EvalReport, FailureClass};
use crate::llm::{complete_with_retries, Backend, CallRole, LlmError, LlmRequest};
use crate::message::{Message, Role};
use crate::prompts;
use crate::trajectory::{Clock, EventKind, Recorder, Trajectory};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("spec form incomplete: {0}")]
    IncompleteSpec(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("spec parse error: {0}")]
    Parse(String),
    #[error("synthesis produced no valid config after {attempts} attempts: {last_error}")]
    SynthesisInvalid { attempts: u32, last_error: String },
    #[error("meta model call failed: {0}")]
    Backend(#[from] LlmError),
    #[error("budget must be at least 1 round")]
    ZeroBudget,
}

const DEFAULT_SCOPE: &str = "general coding tasks inside one repository";
const DEFAULT_CONSTRAINTS: &str = "none";
const DEFAULT_EVAL_TASKS: &str = "none given";

/// The spec form. Unanswered fields take explicit defaults, which are shown
/// to the meta model as such.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpecDraft {
    pub description: String,
    #[serde(default)]
    pub scope: Option<String>,
    #[serde(default)]
    pub constraints: Option<String>,
    #[serde(default)]
    pub extensions: Option<Vec<String>>,
    #[serde(default)]
    pub eval_tasks: Option<String>,
}

impl AgentSpecDraft {
    pub fn from_toml_str(text: &str) -> Result<Self, MetaError> {
        toml::from_str(text).map_err(|e| MetaError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MetaError> {
        let text = std::fs::read_to_string(path).map_err(|source| MetaError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// The form with every field answered, or the precondition violation.
    pub fn form(&self) -> Result<String, MetaError> {
        if self.description.trim().is_empty() {
            return Err(MetaError::IncompleteSpec("description is empty".into()));
        }
        fn field(out: &mut String, name: &str, value: Option<String>, default: &str) {
            match value {
                Some(v) => {
                    let _ = writeln!(out, "- {name}: {v}");
                }
                None => {
                    let _ = writeln!(out, "- {name}: {default} (defaulted)");
                }
            }
        }
        let mut out = String::new();
        field(&mut out, "scope", self.scope.clone(), DEFAULT_SCOPE);
        field(&mut out, "constraints", self.constraints.clone(), DEFAULT_CONSTRAINTS);
        field(&mut out, "extensions", self.extensions.as_ref().map(|e| e.join(", ")), &crate::config::default_extensions().join(", "));
        field(&mut out, "eval tasks", self.eval_tasks.clone(), DEFAULT_EVAL_TASKS);
        Ok(out)
    }
}

/// A config under refinement. Prompt overrides live in
/// `config.prompt_templates`; overrides equal to the built-in text are dropped
/// so that a patch and its reverse restore identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAgent {
    pub config: AgentConfig,
    pub version: u32,
}

impl CandidateAgent {
    pub fn new(mut config: AgentConfig, version: u32) -> Self {
        config.prompt_templates.retain(|name, text| prompts::builtin(name) != Some(text.as_str()));
        Self { config, version }
    }

    pub fn to_toml_string(&self) -> String {
        self.config.to_toml_string()
    }
}

fn agent_config_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<agent_config>(.*?)</agent_config>").unwrap())
}

/// Ask `backend` for a config matching `spec`; invalid replies are sent back
/// with the validation error up to `retries` times.
pub fn synthesize(spec: &AgentSpecDraft, backend: &dyn Backend, recorder: &mut Recorder, retries: u32, template: &str) -> Result<CandidateAgent, MetaError> {
    let form = spec.form()?;
    let prompt = prompts::render(
        template,
        &[("description", spec.description.trim()), ("form", form.trim_end()), ("extensions", &catalog::KNOWN_EXTENSIONS.join(", "))],
    );
    let mut messages = vec![Message::text(0, Role::User, prompt)];
    let mut last_error = String::new();
    for _ in 0..=retries {
        let reply = complete_with_retries(backend, &LlmRequest::new("", messages.clone()), recorder, CallRole::Meta, 0)?;
        let parsed = match agent_config_re().captures(&reply.text) {
            None => Err("reply has no <agent_config> block".to_string()),
            Some(c) => AgentConfig::from_toml_str(c[1].trim()).map_err(|e| e.to_string()),
        };
        match parsed {
            Ok(config) => return Ok(CandidateAgent::new(config, 0)),
            Err(e) => {
                last_error = e;
                let n = messages.len() as u64;
                messages.push(Message::text(n, Role::Assistant, reply.text));
                messages.push(Message::text(n + 1, Role::User, format!("That configuration was rejected: {last_error}. Reply with a corrected <agent_config>.")));
            }
        }
    }
    Err(MetaError::SynthesisInvalid { attempts: retries + 1, last_error })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum PatchTarget {
    Prompt(String),
    Config(String),
}

impl PatchTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s.split_once(':')? {
            ("prompt", n) if !n.is_empty() => Some(PatchTarget::Prompt(n.into())),
            ("config", f) if !f.is_empty() => Some(PatchTarget::Config(f.into())),
            _ => None,
        }
    }
}

impl std::fmt::Display for PatchTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatchTarget::Prompt(n) => write!(f, "prompt:{n}"),
            PatchTarget::Config(n) => write!(f, "config:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementPatch {
    pub target: PatchTarget,
    pub old: String,
    pub new: String,
    pub rationale: String,
}

impl RefinementPatch {
    pub fn reversed(&self) -> Self {
        Self { target: self.target.clone(), old: self.new.clone(), new: self.old.clone(), rationale: format!("revert: {}", self.rationale) }
    }
}

fn patch_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?s)<patch\s+target="([^"]*)"\s*>\s*<old>\n?(.*?)\n?</old>\s*<new>\n?(.*?)\n?</new>\s*(?:<rationale>(.*?)</rationale>\s*)?</patch>"#).unwrap()
    })
}

/// Patches in a meta reply, in order. Unparseable targets are returned as
/// errors for the caller to log.
pub fn parse_patches(text: &str) -> (Vec<RefinementPatch>, Vec<String>) {
    let mut patches = Vec::new();
    let mut bad = Vec::new();
    for c in patch_re().captures_iter(text) {
        match PatchTarget::parse(&c[1]) {
            Some(target) => patches.push(RefinementPatch {
                target,
                old: c[2].to_string(),
                new: c[3].to_string(),
                rationale: c.get(4).map_or("", |m| m.as_str()).trim().to_string(),
            }),
            None => bad.push(format!("unknown patch target `{}`", &c[1])),
        }
    }
    (patches, bad)
}

pub const PATCHABLE_FIELDS: [&str; 6] =
    ["max_iters", "thinking_budget", "enabled_extensions", "compression.recent_window", "compression.trigger_threshold", "compression.target_after"];

/// Current value of a patchable field as patches spell it.
pub fn config_field(config: &AgentConfig, field: &str) -> Option<String> {
    Some(match field {
        "max_iters" => config.max_iters.to_string(),
        "thinking_budget" => config.thinking_budget.to_string(),
        "enabled_extensions" => config.enabled_extensions.join(","),
        "compression.recent_window" => config.compression.recent_window.to_string(),
        "compression.trigger_threshold" => config.compression.trigger_threshold.to_string(),
        "compression.target_after" => config.compression.target_after.to_string(),
        _ => return None,
    })
}

fn set_config_field(config: &mut AgentConfig, field: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
        v.trim().parse().map_err(|_| format!("`{v}` is not a valid number"))
    }
    match field {
        "max_iters" => config.max_iters = num(value)?,
        "thinking_budget" => config.thinking_budget = num(value)?,
        "enabled_extensions" => {
            config.enabled_extensions = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        "compression.recent_window" => config.compression.recent_window = num(value)?,
        "compression.trigger_threshold" => config.compression.trigger_threshold = num(value)?,
        "compression.target_after" => config.compression.target_after = num(value)?,
        _ => return Err(format!("`{field}` is not patchable (patchable: {})", PATCHABLE_FIELDS.join(", "))),
    }
    Ok(())
}

/// Apply one patch. The candidate is unchanged on error.
pub fn apply_patch(candidate: &CandidateAgent, patch: &RefinementPatch) -> Result<CandidateAgent, String> {
    let mut config = candidate.config.clone();
    match &patch.target {
        PatchTarget::Prompt(name) => {
            let builtin = prompts::builtin(name).ok_or_else(|| format!("no prompt template named `{name}`"))?;
            if config.template(name) != patch.old {
                return Err(format!("old value does not match the current `{name}` template"));
            }
            if patch.new == builtin {
                config.prompt_templates.remove(name);
            } else {
                config.prompt_templates.insert(name.clone(), patch.new.clone());
            }
        }
        PatchTarget::Config(field) => {
            let current = config_field(&config, field).ok_or_else(|| format!("`{field}` is not patchable (patchable: {})", PATCHABLE_FIELDS.join(", ")))?;
            if current != patch.old.trim() {
                return Err(format!("old value `{}` does not match current `{field}` = `{current}`", patch.old.trim()));
            }
            set_config_field(&mut config, field, &patch.new)?;
        }
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(CandidateAgent { config, version: candidate.version })
}

/// Failures grouped by class and last error, largest group first.
pub fn triage(report: &EvalReport) -> String {
    let mut groups: BTreeMap<(&'static str, String), Vec<&str>> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| !r.resolved) {
        let class = r.failure_class.unwrap_or(FailureClass::CheckerFailed).as_str();
        let err = r.last_error.clone().or_else(|| r.error.clone()).unwrap_or_else(|| "(no error observed)".into());
        groups.entry((class, err)).or_default().push(&r.task_id);
    }
    let mut groups: Vec<_> = groups.into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::new();
    for ((class, err), tasks) in groups {
        let _ = writeln!(out, "- {class}, {} tasks ({}): {err}", tasks.len(), tasks.join(", "));
    }
    out
}

fn prompts_listing(config: &AgentConfig) -> String {
    let mut out = String::new();
    for name in prompts::builtin_names().filter(|n| !n.starts_with("meta_")) {
        let _ = writeln!(out, "--- {name} ---\n{}\n", config.template(name).trim_end());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub version: u32,
    pub rate: Option<f64>,
    pub resolved: usize,
    pub total: usize,
    pub patches: Vec<RefinementPatch>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    NoFailures,
    NoPatches,
    Stabilized,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImproveOutcome {
    pub baseline: RoundRecord,
    /// One record per evaluated refinement round; the baseline is not included.
    pub history: Vec<RoundRecord>,
    pub best: CandidateAgent,
    pub best_rate: Option<f64>,
    pub stop_reason: StopReason,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

impl ImproveOutcome {
    pub fn render(&self) -> String {
        let mut out = String::from("| Round | Version | Resolved | Rate | Patches | Skipped |\n|---|---|---|---|---|---|\n");
        for r in std::iter::once(&self.baseline).chain(&self.history) {
            let targets: Vec<String> = r.patches.iter().map(|p| p.target.to_string()).collect();
            let _ = writeln!(
                out,
                "| {} | {} | {}/{} | {} | {} | {} |",
                r.round,
                r.version,
                r.resolved,
                r.total,
                format_rate(r.rate),
                if targets.is_empty() { "-".into() } else { targets.join(", ") },
                r.skipped.len()
            );
        }
        let _ = writeln!(out, "\nStopped: {:?}. Selected version {} at {}.", self.stop_reason, self.best.version, format_rate(self.best_rate));
        for w in self.trajectory.of_kind(EventKind::Warning) {
            let _ = writeln!(out, "warning: {}", w.str_field("message"));
        }
        out
    }
}

pub struct ImproveOptions {
    pub budget: u32,
    pub target_rate: f64,
    pub clock: Arc<dyn Clock>,
}

fn rank(rate: Option<f64>) -> f64 {
    rate.unwrap_or(-1.0)
}

/// Refine `candidate` for up to `budget` rounds. `baseline` is the
/// candidate's own evaluation; `evaluate` scores every new version.
///
/// Each round patches the latest version. The loop stops when the target is
/// met, nothing failed, no patch applies, two rounds in a row fail to beat
/// the best rate, or the budget runs out. The returned candidate is the
/// highest-rate version, the latest one on ties.
pub fn improve(
    candidate: CandidateAgent,
    baseline: &EvalReport,
    evaluate: &dyn Fn(&CandidateAgent) -> EvalReport,
    backend: &dyn Backend,
    opts: &ImproveOptions,
) -> Result<ImproveOutcome, MetaError> {
    if opts.budget == 0 {
        return Err(MetaError::ZeroBudget);
    }
    let mut recorder = Recorder::new(Trajectory::new(format!("meta-{}", candidate.config.name), "meta"), opts.clock.clone());
    let record = |round, version, report: &EvalReport, patches, skipped| RoundRecord {
        round,
        version,
        rate: report.rate(),
        resolved: report.resolved(),
        total: report.total(),
        patches,
        skipped,
    };
    let baseline_rec = record(0, candidate.version, baseline, Vec::new(), Vec::new());
    let mut best = (candidate.clone(), baseline.rate());
    let mut current = candidate;
    let mut report = baseline.clone();
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stop = StopReason::BudgetExhausted;
    let template = current.config.template(prompts::META_IMPROVE).to_string();

    for round in 1..=opts.budget {
        if report.rate().is_some_and(|r| r >= opts.target_rate) {
            stop = StopReason::TargetReached;
            break;
        }
        if report.rows.iter().all(|r| r.resolved) {
            stop = StopReason::NoFailures;
            break;
        }
        let prompt = prompts::render(
            &template,
            &[
                ("version", &current.version.to_string()),
                ("config", current.to_toml_string().trim_end()),
                ("prompts", prompts_listing(&current.config).trim_end()),
                ("resolved", &report.resolved().to_string()),
                ("total", &report.total().to_string()),
                ("triage", triage(&report).trim_end()),
            ],
        );
        let reply = complete_with_retries(backend, &LlmRequest::new("", vec![Message::text(0, Role::User, prompt)]), &mut recorder, CallRole::Meta, 0)?;
        let (proposed, mut skipped) = parse_patches(&reply.text);
        let mut next = current.clone();
        let mut applied = Vec::new();
        for p in proposed {
            match apply_patch(&next, &p) {
                Ok(c) => {
                    next = c;
                    applied.push(p);
                }
                Err(e) => skipped.push(format!("{}: {e}", p.target)),
            }
        }
        for s in &skipped {
            recorder.warn("meta", format!("patch skipped: {s}"));
        }
        if applied.is_empty() {
            stop = StopReason::NoPatches;
            break;
        }
        next.version = current.version + 1;
        report = evaluate(&next);
        let rec = record(round, next.version, &report, applied, skipped);
        history.push(rec);
        if rank(report.rate()) > rank(best.1) {
            stale = 0;
        } else {
            stale += 1;
        }
        if rank(report.rate()) >= rank(best.1) {
            best = (next.clone(), report.rate());
        }
        current = next;
        if stale >= 2 {
            stop = StopReason::Stabilized;
            break;
        }
    }
    Ok(ImproveOutcome { baseline: baseline_rec, history, best: best.0, best_rate: best.1, stop_reason: stop, trajectory: recorder.into_trajectory() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TaskRow;
    use crate::llm::{Matcher, Script, ScriptEntry, ScriptedBackend, ScriptedResponse};
    use crate::trajectory::FixedClock;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn recorder() -> Recorder {
        Recorder::new(Trajectory::new("t", "t"), Arc::new(FixedClock::default()))
    }

    fn backend(replies: &[&str]) -> ScriptedBackend {
        ScriptedBackend::new(Script { entries: replies.iter().map(|r| ScriptEntry::always(ScriptedResponse::text(*r)).repeating()).collect() })
    }

    fn report(resolved: &[bool]) -> EvalReport {
        EvalReport {
            rows: resolved
                .iter()
                .enumerate()
                .map(|(i, &ok)| TaskRow {
                    task_id: format!("t{i}"),
                    resolved: ok,
                    status: "completed".into(),
                    iterations: 1,
                    token_cost: 1,
                    edited_files: 1,
                    failure_class: (!ok).then_some(FailureClass::CheckerFailed),
                    last_error: (!ok).then(|| "boom".into()),
                    error: None,
                })
                .collect(),
        }
    }

    fn spec() -> AgentSpecDraft {
        AgentSpecDraft { description: "fix small bugs".into(), ..Default::default() }
    }

    const GOOD: &str = "<agent_config>\nname = \"fixer\"\nmodel_ref = \"scripted\"\nenabled_extensions = [\"bash\", \"file_edit\"]\n</agent_config>";

    #[test]
    fn synthesizes_version_zero() {
        let c = synthesize(&spec(), &backend(&[GOOD]), &mut recorder(), 1, prompts::builtin(prompts::META_SYNTHESIZE).unwrap()).unwrap();
        assert_eq!(c.version, 0);
        assert_eq!(c.config.enabled_extensions, ["bash", "file_edit"]);
    }

    #[test]
    fn invalid_config_error_reaches_retry_prompt() {
        let bad = "<agent_config>\nname = \"x\"\nmodel_ref = \"scripted\"\nenabled_extensions = [\"teleport\"]\n</agent_config>";
        let script = Script {
            entries: vec![ScriptEntry::when(Matcher::Contains("unknown extension `teleport`".into()), ScriptedResponse::text(GOOD)), ScriptEntry::always(ScriptedResponse::text(bad)).repeating()],
        };
        let c = synthesize(&spec(), &ScriptedBackend::new(script), &mut recorder(), 1, prompts::builtin(prompts::META_SYNTHESIZE).unwrap()).unwrap();
        assert_eq!(c.config.name, "fixer");
        let err = synthesize(&spec(), &backend(&[bad]), &mut recorder(), 2, prompts::builtin(prompts::META_SYNTHESIZE).unwrap()).unwrap_err();
        assert!(matches!(err, MetaError::SynthesisInvalid { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn empty_description_is_rejected() {
        let err = synthesize(&AgentSpecDraft::default(), &backend(&[GOOD]), &mut recorder(), 1, "x").unwrap_err();
        assert!(matches!(err, MetaError::IncompleteSpec(_)));
    }

    #[test]
    fn form_marks_defaults() {
        let form = spec().form().unwrap();
        assert!(form.contains("- constraints: none (defaulted)"));
        let s = AgentSpecDraft { constraints: Some("no network".into()), ..spec() };
        assert!(s.form().unwrap().contains("- constraints: no network\n"));
    }

    #[test]
    fn patch_parsing_and_mismatch() {
        let text = "<patch target=\"config:max_iters\">\n<old>50</old>\n<new>80</new>\n<rationale>more room</rationale>\n</patch>\n<patch target=\"bogus\"><old>a</old><new>b</new></patch>";
        let (patches, bad) = parse_patches(text);
        assert_eq!(patches.len(), 1);
        assert_eq!(bad.len(), 1);
        let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
        assert_eq!(apply_patch(&c, &patches[0]).unwrap().config.max_iters, 80);
        let stale = RefinementPatch { old: "49".into(), ..patches[0].clone() };
        assert!(apply_patch(&c, &stale).unwrap_err().contains("does not match"));
        let unknown = RefinementPatch { target: PatchTarget::Config("model_ref".into()), old: "scripted".into(), new: "x".into(), rationale: String::new() };
        assert!(apply_patch(&c, &unknown).is_err());
    }

    #[test]
    fn no_failures_runs_zero_rounds() {
        let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
        let calls = Cell::new(0);
        let eval = |_: &CandidateAgent| {
            calls.set(calls.get() + 1);
            report(&[true])
        };
        let opts = ImproveOptions { budget: 3, target_rate: 101.0, clock: Arc::new(FixedClock::default()) };
        let out = improve(c, &report(&[true, true]), &eval, &backend(&["nothing"]), &opts).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.stop_reason, StopReason::NoFailures);
        assert_eq!(calls.get(), 0);
    }

    #[test]
    fn non_improving_patches_exhaust_budget_two() {
        let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
        let script = Script {
            entries: vec![
                ScriptEntry::when(Matcher::Contains("max_iters = 50".into()), ScriptedResponse::text("<patch target=\"config:max_iters\"><old>50</old><new>60</new></patch>")),
                ScriptEntry::always(ScriptedResponse::text("<patch target=\"config:max_iters\"><old>60</old><new>70</new></patch>")),
            ],
        };
        let rates = [report(&[true, false, false]), report(&[false, true, false])];
        let n = Cell::new(0);
        let eval = |_: &CandidateAgent| {
            n.set(n.get() + 1);
            rates[n.get() - 1].clone()
        };
        let opts = ImproveOptions { budget: 2, target_rate: 100.0, clock: Arc::new(FixedClock::default()) };
        let out = improve(c, &report(&[true, false, false]), &eval, &ScriptedBackend::new(script), &opts).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best.version, 2);
        assert_eq!(out.best.config.max_iters, 70);
        assert_eq!(out.stop_reason, StopReason::Stabilized);
    }

    #[test]
    fn mismatched_patch_is_skipped_with_warning() {
        let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
        let eval = |_: &CandidateAgent| report(&[true]);
        let opts = ImproveOptions { budget: 2, target_rate: 100.0, clock: Arc::new(FixedClock::default()) };
        let out = improve(c, &report(&[false]), &eval, &backend(&["<patch target=\"config:max_iters\"><old>7</old><new>8</new></patch>"]), &opts).unwrap();
        assert_eq!(out.stop_reason, StopReason::NoPatches);
        assert!(out.history.is_empty());
        assert_eq!(out.trajectory.of_kind(EventKind::Warning).count(), 1);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
        let opts = ImproveOptions { budget: 0, target_rate: 100.0, clock: Arc::new(FixedClock::default()) };
        assert!(matches!(improve(c, &report(&[false]), &|_| report(&[]), &backend(&[""]), &opts), Err(MetaError::ZeroBudget)));
    }

    #[test]
    fn triage_groups_by_class_and_error() {
        let mut r = report(&[false, false, true]);
        r.rows[1].last_error = Some("other".into());
        r.rows.push(TaskRow { task_id: "t9".into(), ..r.rows[0].clone() });
        let t = triage(&r);
        assert_eq!(t, "- checker_failed, 2 tasks (t0, t9): boom\n- checker_failed, 1 tasks (t1): other\n");
    }

    fn arb_patch() -> impl Strategy<Value = RefinementPatch> {
        let config = (prop::sample::select(&["max_iters", "thinking_budget", "compression.recent_window"][..]), 1u32..500)
            .prop_map(|(f, v)| (PatchTarget::Config(f.to_string()), v.to_string()));
        let exts = prop::sample::subsequence(catalog::KNOWN_EXTENSIONS.to_vec(), 0..=6)
            .prop_map(|e| (PatchTarget::Config("enabled_extensions".into()), e.join(",")));
        let prompt = (prop::sample::select(prompts::builtin_names().collect::<Vec<_>>()), "[a-z ]{0,30}", any::<bool>())
            .prop_map(|(n, t, builtin)| (PatchTarget::Prompt(n.to_string()), if builtin { prompts::builtin(n).unwrap().to_string() } else { t }));
        prop_oneof![config, exts, prompt].prop_map(|(target, new)| RefinementPatch { target, old: String::new(), new, rationale: String::new() })
    }

    proptest! {
        #[test]
        fn patch_then_revert_is_byte_identical(setup in proptest::collection::vec(arb_patch(), 0..4), patch in arb_patch()) {
            let mut c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
            for p in setup {
                let current = match &p.target {
                    PatchTarget::Prompt(n) => c.config.template(n).to_string(),
                    PatchTarget::Config(f) => config_field(&c.config, f).unwrap(),
                };
                if let Ok(next) = apply_patch(&c, &RefinementPatch { old: current, ..p }) {
                    c = next;
                }
            }
            let old = match &patch.target {
                PatchTarget::Prompt(n) => c.config.template(n).to_string(),
                PatchTarget::Config(f) => config_field(&c.config, f).unwrap(),
            };
            let patch = RefinementPatch { old, ..patch };
            if let Ok(patched) = apply_patch(&c, &patch) {
                let back = apply_patch(&patched, &patch.reversed()).unwrap();
                prop_assert_eq!(back.to_toml_string(), c.to_toml_string());
            }
        }

        #[test]
        fn selected_rate_dominates(rates in proptest::collection::vec(0usize..=4, 1..6)) {
            let c = CandidateAgent::new(AgentConfig::new("a", "scripted"), 0);
            let reports: Vec<EvalReport> = rates.iter().map(|&k| report(&(0..4).map(|i| i < k).collect::<Vec<_>>())).collect();
            let n = Cell::new(0);
            let eval = |_: &CandidateAgent| {
                n.set(n.get() + 1);
                reports[n.get().min(reports.len() - 1)].clone()
            };
            let opts = ImproveOptions { budget: 6, target_rate: 100.0, clock: Arc::new(FixedClock::default()) };
            let out = improve(c, &reports[0], &eval, &PatchEcho, &opts).unwrap();
            let all: Vec<f64> = std::iter::once(&out.baseline).chain(&out.history).map(|r| rank(r.rate)).collect();
            prop_assert!(all.iter().all(|&r| rank(out.best_rate) >= r));
            let latest_best = std::iter::once(&out.baseline).chain(&out.history).filter(|r| rank(r.rate) == rank(out.best_rate)).last().unwrap();
            prop_assert_eq!(latest_best.version, out.best.version);
        }
    }

    /// Meta backend that bumps max_iters by one each call.
    struct PatchEcho;

    impl Backend for PatchEcho {
        fn model_ref(&self) -> &str {
            "echo"
        }

        fn complete(&self, request: &LlmRequest) -> Result<crate::llm::LlmResponse, LlmError> {
            let text = request.conversation_text();
            let cur: u32 = Regex::new(r"max_iters = (\d+)").unwrap().captures(&text).unwrap()[1].parse().unwrap();
            Ok(crate::llm::LlmResponse::text(format!("<patch target=\"config:max_iters\"><old>{cur}</old><new>{}</new></patch>", cur + 1)))
        }
    }
}
