//! Post-session note distillation.
//!
//! The note taker sees the session transcript plus two machine-readable
//! blocks: `<facts>` (a JSON object) and `<failures>` (a JSON array of
//! failed actions). It answers with `<note path="...">` blocks holding
//! complete note files.

use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::{Note, NoteKind};
use crate::llm::{self, Backend, CallRole, LlmError, LlmRequest, LlmResponse};
use crate::message::{agent_transcript, Message, Role};
use crate::orchestrator::project_history;
use crate::prompts;
use crate::trajectory::{Clock, EventKind, Recorder, Trajectory};

pub const REFERENCE_NOTES: &str = "reference-notes";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DistillError {
    #[error("trajectory has no session_end event")]
    Incomplete,
    #[error("note backend failed: {0}")]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub notes: Vec<Note>,
    /// Log of the note-taking calls.
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Failure {
    seq: u64,
    action: String,
    agent_text: String,
    /// A later call of the same action succeeded.
    later_success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
struct Facts {
    project: String,
    session_id: String,
    task: String,
    edited_files: Vec<String>,
    final_output: String,
}

const FAILURE_TEXT_LIMIT: usize = 600;

fn failures(trajectory: &Trajectory) -> Vec<Failure> {
    let executed: Vec<_> = trajectory.of_kind(EventKind::ActionExecuted).collect();
    executed
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.str_field("status"), "error" | "rejected"))
        .map(|(i, e)| {
            let action = e.str_field("action").to_string();
            let later_success = executed[i + 1..].iter().any(|l| l.str_field("action") == action && l.str_field("status") == "success");
            let mut agent_text = e.str_field("agent_text").to_string();
            if agent_text.len() > FAILURE_TEXT_LIMIT {
                let mut cut = FAILURE_TEXT_LIMIT;
                while !agent_text.is_char_boundary(cut) {
                    cut -= 1;
                }
                agent_text.truncate(cut);
                agent_text.push_str("...");
            }
            Failure { seq: e.seq, action, agent_text, later_success }
        })
        .collect()
}

fn facts(trajectory: &Trajectory, project: &str) -> Facts {
    let end = trajectory.of_kind(EventKind::SessionEnd).last();
    Facts {
        project: project.to_string(),
        session_id: trajectory.session_id.clone(),
        task: trajectory.of_kind(EventKind::UserMessage).next().map(|e| e.str_field("text").to_string()).unwrap_or_default(),
        edited_files: end
            .and_then(|e| e.payload.get("edited_files"))
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default(),
        final_output: end.map(|e| e.str_field("final_output").to_string()).unwrap_or_default(),
    }
}

fn note_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?s)<note path="([^"]+)">\n?(.*?)</note>"#).expect("note regex"))
}

fn error_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(traceback \(most recent call last\)|\b\w*(error|exception):|command rejected|no exact occurrence found|exit code: [1-9])")
            .expect("error regex")
    })
}

/// Notes quoting error text are hindsight notes; others keep the backend's
/// label, defaulting to solution.
pub fn infer_kind(note: &Note) -> NoteKind {
    if error_re().is_match(&note.body) {
        NoteKind::Hindsight
    } else {
        note.kind.unwrap_or(NoteKind::Solution)
    }
}

/// Split a note-taker reply into valid notes and `(path, error)` pairs.
fn parse_reply(text: &str) -> (Vec<Note>, Vec<(String, String)>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for cap in note_re().captures_iter(text) {
        let path = cap[1].to_string();
        match Note::parse(&path, &cap[2]).and_then(|n| n.validate().map(|_| n)) {
            Ok(n) => ok.push(n),
            Err(e) => bad.push((path, e.to_string())),
        }
    }
    (ok, bad)
}

/// Distill a finished session into notes for `project`.
pub fn distill(trajectory: &Trajectory, backend: &dyn Backend, project: &str, template: &str, clock: Arc<dyn Clock>) -> Result<Distilled, DistillError> {
    if trajectory.of_kind(EventKind::SessionEnd).next().is_none() {
        return Err(DistillError::Incomplete);
    }
    let mut rec = Recorder::new(Trajectory::new(format!("{}-notes", trajectory.session_id), "note_taker"), clock);
    if trajectory.of_kind(EventKind::ActionExecuted).next().is_none() {
        rec.record(EventKind::NoteOp, json!({ "op": "distill", "source_session": trajectory.session_id, "count": 0, "paths": [] }));
        return Ok(Distilled { notes: Vec::new(), trajectory: rec.into_trajectory() });
    }
    let facts_json = serde_json::to_string_pretty(&facts(trajectory, project)).expect("facts serialize");
    let failures_json = serde_json::to_string_pretty(&failures(trajectory)).expect("failures serialize");
    let transcript = agent_transcript(&project_history(trajectory));
    let prompt = prompts::render(
        template,
        &[("project", project), ("facts", &facts_json), ("failures", &failures_json), ("transcript", &transcript)],
    );
    let mut messages = vec![Message::text(0, Role::User, prompt)];
    let reply = llm::complete(backend, &LlmRequest::new("", messages.clone()), &mut rec, CallRole::NoteTaker)?;
    let (mut notes, bad) = parse_reply(&reply.text);
    if !bad.is_empty() {
        let list: String = bad.iter().map(|(p, e)| format!("- {p}: {e}\n")).collect();
        messages.push(Message::text(0, Role::Assistant, reply.text));
        messages.push(Message::text(0, Role::User, format!("These notes are invalid:\n{list}Reply with corrected <note> blocks for them only.")));
        let retry = llm::complete(backend, &LlmRequest::new("", messages), &mut rec, CallRole::NoteTaker)?;
        let (fixed, still_bad) = parse_reply(&retry.text);
        for n in fixed {
            if bad.iter().any(|(p, _)| *p == n.path) && !notes.iter().any(|m| m.path == n.path) {
                notes.push(n);
            }
        }
        for (path, _) in &bad {
            if !notes.iter().any(|n| n.path == *path) {
                let why = still_bad.iter().find(|(p, _)| p == path).map_or("not returned on retry", |(_, e)| e.as_str());
                rec.warn("note_store", format!("dropped note {path}: {why}"));
            }
        }
    }
    for n in &mut notes {
        n.kind = Some(infer_kind(n));
        n.origin_session = Some(trajectory.session_id.clone());
    }
    let paths: Vec<&str> = notes.iter().map(|n| n.path.as_str()).collect();
    rec.record(EventKind::NoteOp, json!({ "op": "distill", "source_session": trajectory.session_id, "count": notes.len(), "paths": paths }));
    Ok(Distilled { notes, trajectory: rec.into_trajectory() })
}

/// Deterministic note taker built from the `<facts>` and `<failures>`
/// blocks: one hindsight note per failing action name, one solution note
/// when files were edited.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceNoteBackend;

fn block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim())
}

fn slug(s: &str) -> String {
    let mut out: String = s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    while out.contains("__") {
        out = out.replace("__", "_");
    }
    out.trim_matches('_').to_string()
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}\n")).collect()
}

fn render_note(path: String, title: &str, description: &str, keywords: &[String], body: &str) -> String {
    let id = path.rsplit('/').next().and_then(|f| f.strip_suffix(".md")).unwrap_or_default().to_string();
    let note = Note {
        path: path.clone(),
        id,
        title: title.into(),
        description: description.into(),
        keywords: keywords.to_vec(),
        kind: None,
        origin_session: None,
        body: body.into(),
    };
    format!("<note path=\"{path}\">\n{}</note>\n", note.render())
}

impl ReferenceNoteBackend {
    fn notes_for(prompt: &str) -> String {
        let facts: Facts = block(prompt, "facts").and_then(|f| serde_json::from_str(f).ok()).unwrap_or_default();
        let failures: Vec<Failure> = block(prompt, "failures").and_then(|f| serde_json::from_str(f).ok()).unwrap_or_default();
        let project = if facts.project.is_empty() { "default".to_string() } else { slug(&facts.project) };
        let mut out = String::new();
        let mut seen: Vec<&str> = Vec::new();
        for f in &failures {
            if seen.contains(&f.action.as_str()) {
                continue;
            }
            seen.push(&f.action);
            let action = slug(&f.action);
            let path = format!("projects/{project}/hindsight_{action}_{}.md", f.seq);
            let outcome = if f.later_success {
                format!("Resolved: a later `{}` call succeeded once the request matched the current state of the workspace.", f.action)
            } else {
                format!("Abandoned: no later `{}` call succeeded in this session; the approach was dropped.", f.action)
            };
            let body = format!(
                "\n# Hindsight: {} failure\n\nThe `{}` action failed with:\n\n{}\n{outcome}\n",
                f.action,
                f.action,
                indent(&f.agent_text)
            );
            let keywords = vec![f.action.clone(), "hindsight".into(), project.clone()];
            let how = if f.later_success { "resolved" } else { "abandoned" };
            out.push_str(&render_note(path, &format!("Hindsight: {} failure", f.action), &format!("What broke in `{}` and how it was {how}", f.action), &keywords, &body));
        }
        if !facts.edited_files.is_empty() {
            let path = format!("projects/{project}/solution_{}.md", slug(&facts.session_id));
            let task_line = facts.task.lines().find(|l| !l.trim().is_empty()).unwrap_or("task").trim();
            let task_line: String = task_line.chars().take(80).collect();
            let files: String = facts.edited_files.iter().map(|f| format!("- `{f}`\n")).collect();
            let mut body = format!("\n# Solution: {task_line}\n\nFiles changed:\n\n{files}");
            if !facts.final_output.trim().is_empty() {
                body.push_str(&format!("\nOutcome:\n\n{}", indent(facts.final_output.trim())));
            }
            let mut keywords: Vec<String> = vec![project.clone(), "solution".into()];
            keywords.extend(facts.edited_files.iter().map(|f| f.rsplit('/').next().unwrap_or(f).to_string()));
            out.push_str(&render_note(
                path,
                &format!("Solution: {task_line}"),
                &format!("Files changed to resolve the task: {}", facts.edited_files.join(", ")),
                &keywords,
                &body,
            ));
        }
        out
    }
}

impl Backend for ReferenceNoteBackend {
    fn model_ref(&self) -> &str {
        REFERENCE_NOTES
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let prompt = request.messages.iter().rev().find(|m| m.role == Role::User).map(Message::rendered).unwrap_or_default();
        Ok(LlmResponse::text(Self::notes_for(&prompt)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Script, ScriptEntry, ScriptedBackend, ScriptedResponse};
    use crate::trajectory::FixedClock;
    use serde_json::Value;

    fn traj(events: &[(EventKind, Value)]) -> Trajectory {
        let mut rec = Recorder::new(Trajectory::new("s1", "c"), Arc::new(FixedClock::default()));
        for (k, p) in events {
            rec.record(*k, p.clone());
        }
        rec.into_trajectory()
    }

    fn clock() -> Arc<dyn Clock> {
        Arc::new(FixedClock::default())
    }

    fn failing_then_fixed() -> Trajectory {
        traj(&[
            (EventKind::UserMessage, json!({ "text": "fix the port", "pinned": true })),
            (EventKind::ActionExecuted, json!({ "index": 0, "action": "file_edit", "status": "error", "agent_text": "No exact occurrence found for the search string you provided." })),
            (EventKind::ActionExecuted, json!({ "index": 0, "action": "file_edit", "status": "success", "agent_text": "Content replaced successfully", "edited_file": "config.py" })),
            (EventKind::SessionEnd, json!({ "status": "completed", "iterations": 3, "final_output": "done", "edited_files": ["config.py"] })),
        ])
    }

    #[test]
    fn resolved_failure_yields_hindsight_note_naming_the_error() {
        let out = distill(&failing_then_fixed(), &ReferenceNoteBackend, "demo", prompts::builtin(prompts::NOTE_TAKER).unwrap(), clock()).unwrap();
        let hind: Vec<_> = out.notes.iter().filter(|n| n.kind == Some(NoteKind::Hindsight)).collect();
        assert_eq!(hind.len(), 1);
        assert!(hind[0].body.contains("No exact occurrence found"));
        assert!(hind[0].body.contains("Resolved"));
        assert!(hind[0].keywords.contains(&"file_edit".to_string()));
        assert!(out.notes.iter().any(|n| n.kind == Some(NoteKind::Solution) && n.path.starts_with("projects/demo/solution_")));
        assert!(out.notes.iter().all(|n| n.validate().is_ok() && n.origin_session.as_deref() == Some("s1")));
    }

    #[test]
    fn trivial_session_yields_nothing() {
        let t = traj(&[
            (EventKind::UserMessage, json!({ "text": "hello" })),
            (EventKind::SessionEnd, json!({ "status": "completed", "iterations": 1 })),
        ]);
        assert!(distill(&t, &ReferenceNoteBackend, "p", "", clock()).unwrap().notes.is_empty());
    }

    #[test]
    fn incomplete_trajectory_is_refused() {
        let t = traj(&[(EventKind::UserMessage, json!({ "text": "x" }))]);
        assert_eq!(distill(&t, &ReferenceNoteBackend, "p", "", clock()).unwrap_err(), DistillError::Incomplete);
    }

    #[test]
    fn invalid_note_is_retried_then_dropped() {
        let bad = "<note path=\"shared/t/a.md\">\n---\nid: a\ntitle: A\n---\nbody</note>";
        let good_b = "<note path=\"shared/t/b.md\">\n---\nid: b\ntitle: B\ndescription: d\nkeywords:\n    - k\n---\nbody\n</note>";
        let backend = ScriptedBackend::new(Script {
            entries: vec![
                ScriptEntry::always(ScriptedResponse::text(format!("{bad}\n{good_b}"))),
                ScriptEntry::always(ScriptedResponse::text(bad)),
            ],
        });
        let out = distill(&failing_then_fixed(), &backend, "p", "{{failures}}", clock()).unwrap();
        assert_eq!(out.notes.iter().map(|n| n.path.as_str()).collect::<Vec<_>>(), vec!["shared/t/b.md"]);
        assert_eq!(out.trajectory.of_kind(EventKind::LlmRequest).count(), 2);
        assert!(out.trajectory.of_kind(EventKind::Warning).any(|w| w.str_field("message").contains("dropped note shared/t/a.md")));
    }

    #[test]
    fn retry_can_fix_a_note() {
        let bad = "<note path=\"shared/t/a.md\">\n---\nid: wrong\ntitle: A\ndescription: d\nkeywords:\n    - k\n---\n</note>";
        let good = "<note path=\"shared/t/a.md\">\n---\nid: a\ntitle: A\ndescription: d\nkeywords:\n    - k\n---\n</note>";
        let backend = ScriptedBackend::new(Script {
            entries: vec![ScriptEntry::always(ScriptedResponse::text(bad)), ScriptEntry::always(ScriptedResponse::text(good))],
        });
        let out = distill(&failing_then_fixed(), &backend, "p", "", clock()).unwrap();
        assert_eq!(out.notes.len(), 1);
        assert_eq!(out.notes[0].id, "a");
    }

    #[test]
    fn kind_inference() {
        let mut n = Note::parse("shared/t/a.md", "---\nid: a\ntitle: A\ndescription: d\nkeywords:\n    - k\n---\nplain advice\n").unwrap();
        assert_eq!(infer_kind(&n), NoteKind::Solution);
        n.kind = Some(NoteKind::Finding);
        assert_eq!(infer_kind(&n), NoteKind::Finding);
        n.body = "It raised KeyError: 'x'".into();
        assert_eq!(infer_kind(&n), NoteKind::Hindsight);
    }

    #[test]
    fn abandoned_failure_says_so() {
        let t = traj(&[
            (EventKind::ActionExecuted, json!({ "action": "bash", "status": "rejected", "agent_text": "Command rejected (disallowed): `cd ...`" })),
            (EventKind::SessionEnd, json!({ "status": "iter_capped", "iterations": 3 })),
        ]);
        let out = distill(&t, &ReferenceNoteBackend, "p", prompts::builtin(prompts::NOTE_TAKER).unwrap(), clock()).unwrap();
        assert_eq!(out.notes.len(), 1);
        assert!(out.notes[0].body.contains("Abandoned"));
        assert!(out.notes[0].body.contains("Command rejected (disallowed)"));
    }

}
