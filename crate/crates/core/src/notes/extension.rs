use std::path::PathBuf;

use serde_json::json;

use super::{Note, NoteStore};
use crate::codec::{Action, ToolOutcome, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, Hooks, RunContext};
use crate::message::{Message, Role};
use crate::trajectory::EventKind;

/// First line of the injected digest.
pub const DIGEST_HEADER: &str = "NOTES FROM EARLIER SESSIONS";

/// Imports a notes directory at session start, shows a digest before every
/// model call and serves full notes through `note_read`.
#[derive(Debug, Default)]
pub struct NotesExtension {
    dir: Option<PathBuf>,
    notes: Vec<Note>,
}

impl NotesExtension {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, notes: Vec::new() }
    }

    fn digest(&self) -> String {
        let mut out = format!("{DIGEST_HEADER}\nRead a note in full with <note_read>PATH</note_read>.\n");
        for n in &self.notes {
            out.push_str(&format!("- {}: {}. {}\n", n.path, n.title, n.description));
        }
        out
    }
}

impl Extension for NotesExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("notes")
            .tool(ToolSchema::new("note_read", "Show a note from earlier sessions. The body is the note path.", "path"))
            .hooks(Hooks { session_start: true, input_messages: true, ..Hooks::default() })
    }

    fn on_session_start(&mut self, ctx: &mut RunContext) -> Result<(), HookError> {
        let Some(dir) = self.dir.as_ref().filter(|d| d.is_dir()) else {
            if let Some(d) = &self.dir {
                ctx.recorder.warn("notes", format!("notes directory {} does not exist", d.display()));
            }
            return Ok(());
        };
        let store = NoteStore::open(dir).map_err(|e| HookError::new(e.to_string()))?;
        match store.load_all() {
            Ok(notes) => self.notes = notes,
            Err(e) => {
                ctx.recorder.warn("notes", format!("notes not imported: {e}"));
            }
        }
        let paths: Vec<&str> = self.notes.iter().map(|n| n.path.as_str()).collect();
        ctx.recorder.record(EventKind::NoteOp, json!({ "op": "import", "count": paths.len(), "paths": paths }));
        Ok(())
    }

    fn on_input_messages(&mut self, _ctx: &mut RunContext, mut messages: Vec<Message>) -> Result<Vec<Message>, HookError> {
        if !self.notes.is_empty() {
            messages.insert(0, Message::text(0, Role::User, self.digest()).pinned());
        }
        Ok(messages)
    }

    fn on_action(&mut self, _ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        if action.name != "note_read" {
            return Ok(ActionResult::NotHandled);
        }
        let path = action.attr("path").unwrap_or(action.body.trim());
        let outcome = match self.notes.iter().find(|n| n.path == path) {
            Some(n) => ToolOutcome::success(n.render(), format!("Reading note `{path}`")),
            None => {
                let known: Vec<&str> = self.notes.iter().map(|n| n.path.as_str()).collect();
                let msg = format!("Note `{path}` not found. Available: {}.", if known.is_empty() { "none".into() } else { known.join(", ") });
                ToolOutcome::error(msg.clone(), msg)
            }
        };
        Ok(ActionResult::Observed(outcome))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::tests::test_ctx;

    fn note(path: &str, title: &str) -> Note {
        let id = path.rsplit('/').next().unwrap().trim_end_matches(".md").to_string();
        Note {
            path: path.into(),
            id,
            title: title.into(),
            description: format!("when {title}"),
            keywords: vec!["k".into()],
            kind: None,
            origin_session: None,
            body: "\n# body\n".into(),
        }
    }

    #[test]
    fn imports_two_notes_into_one_digest() {
        let (dir, mut ctx) = test_ctx();
        let root = dir.path().join("notes");
        NoteStore::open(&root).unwrap().persist(&[note("shared/a/x.md", "X"), note("projects/p/y.md", "Y")]).unwrap();
        let mut ext = NotesExtension::new(Some(root));
        ext.on_session_start(&mut ctx).unwrap();
        let msgs = ext.on_input_messages(&mut ctx, vec![Message::text(1, Role::User, "task")]).unwrap();
        assert_eq!(msgs.len(), 2);
        let digest = msgs[0].rendered();
        assert!(digest.starts_with(DIGEST_HEADER));
        assert!(digest.contains("- projects/p/y.md: Y. when Y"));
        assert!(digest.contains("- shared/a/x.md: X. when X"));
        let ActionResult::Observed(out) = ext.on_action(&mut ctx, &Action::new("note_read").with_body("shared/a/x.md")).unwrap() else { panic!() };
        assert!(out.agent_text.contains("# body"));
        let import = ctx.recorder.trajectory().of_kind(EventKind::NoteOp).next().unwrap();
        assert_eq!(import.u64_field("count"), 2);
    }

    #[test]
    fn empty_store_injects_nothing() {
        let (dir, mut ctx) = test_ctx();
        let root = dir.path().join("notes");
        std::fs::create_dir_all(&root).unwrap();
        let mut ext = NotesExtension::new(Some(root));
        ext.on_session_start(&mut ctx).unwrap();
        let msgs = ext.on_input_messages(&mut ctx, vec![Message::text(1, Role::User, "task")]).unwrap();
        assert_eq!(msgs.len(), 1);
    }

    #[test]
    fn missing_note_is_an_error_observation() {
        let (_dir, mut ctx) = test_ctx();
        let mut ext = NotesExtension::new(None);
        let ActionResult::Observed(out) = ext.on_action(&mut ctx, &Action::new("note_read").with_body("shared/a/x.md")).unwrap() else { panic!() };
        assert!(out.agent_text.starts_with("Note `shared/a/x.md` not found"));
    }
}
