//! User-channel transcript.
//!
//! The user view is a stream of blocks. Model prose goes in `<AI>` blocks;
//! tool activity, status lines and warnings go in `<SYSTEM>` blocks.
//! Consecutive tool results share one block:
//!
//! ```text
//! Running coder with prompt from file: task.md
//!
//! <AI>
//! Let me check the repository state:
//!
//! <SYSTEM>
//! Validating command `git status`
//! Running command in `.`:
//!   git status
//! Output:
//!   nothing to commit
//! ```
//!
//! Rendering depends only on the trajectory, so a stored trajectory replays
//! to the same bytes.

use std::io::{self, Write};

use serde_json::Value;

use crate::codec::{parse_xml_actions, ToolRegistry, ToolSchema};
use crate::trajectory::{Event, EventKind, EventSink, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Ai,
    System,
    User,
}

#[derive(Debug, Clone, Default)]
pub struct UserView {
    registry: ToolRegistry,
    native: bool,
    from_file: bool,
    block: Option<Block>,
}

impl UserView {
    pub fn new() -> Self {
        Self::default()
    }

    fn open(&mut self, block: Block, out: &mut String) {
        if self.block != Some(block) {
            out.push_str(match block {
                Block::Ai => "\n<AI>\n",
                Block::System => "\n<SYSTEM>\n",
                Block::User => "\n<USER>\n",
            });
            self.block = Some(block);
        }
    }

    fn system_line(&mut self, text: &str, out: &mut String) {
        if text.is_empty() {
            return;
        }
        self.open(Block::System, out);
        out.push_str(text);
        out.push('\n');
    }

    /// Text appended to the transcript for `event`.
    pub fn render(&mut self, event: &Event) -> String {
        let mut out = String::new();
        let p = &event.payload;
        match event.kind {
            EventKind::SessionStart => {
                self.registry = p
                    .get("tools")
                    .and_then(|t| serde_json::from_value::<Vec<ToolSchema>>(t.clone()).ok())
                    .unwrap_or_default()
                    .into_iter()
                    .collect();
                self.native = event.str_field("backend_mode") == "native";
                let name = event.str_field("agent");
                match p.get("prompt_file").and_then(Value::as_str) {
                    Some(file) => {
                        self.from_file = true;
                        out.push_str(&format!("Running {name} with prompt from file: {file}\n"));
                    }
                    None => out.push_str(&format!("Running {name} with prompt\n")),
                }
            }
            EventKind::UserMessage => {
                if !self.from_file {
                    self.open(Block::User, &mut out);
                    out.push_str(event.str_field("text").trim_end());
                    out.push('\n');
                }
            }
            EventKind::LlmResponse if event.str_field("role") == "agent" => {
                if let Some(err) = p.get("error").and_then(Value::as_str) {
                    self.system_line(&format!("Model call failed: {err}"), &mut out);
                    return out;
                }
                let text = event.str_field("text");
                let prose = if self.native {
                    text.to_string()
                } else {
                    parse_xml_actions(text, &self.registry).map(|o| o.commentary).unwrap_or_else(|_| text.to_string())
                };
                let prose = prose.trim();
                if !prose.is_empty() {
                    self.open(Block::Ai, &mut out);
                    out.push_str(prose);
                    out.push('\n');
                }
            }
            EventKind::ActionExecuted => {
                let user = event.str_field("user_text");
                let shown = if user.is_empty() { event.str_field("agent_text") } else { user };
                self.system_line(shown.trim_end(), &mut out);
            }
            EventKind::ValidationReject if event.str_field("source") == "parse" => {
                self.system_line(&format!("Could not parse model output: {}", event.str_field("error")), &mut out);
            }
            EventKind::Compression => {
                let n = p.get("span_indices").and_then(Value::as_array).map_or(0, Vec::len);
                let line = format!(
                    "Compressed {n} messages ({} -> {} tokens)",
                    event.u64_field("pre_tokens"),
                    event.u64_field("post_tokens")
                );
                self.system_line(&line, &mut out);
            }
            EventKind::NoteOp if event.str_field("op") == "import" => {
                let n = event.u64_field("count");
                if n > 0 {
                    self.system_line(&format!("Imported {n} notes from earlier sessions"), &mut out);
                }
            }
            EventKind::Warning => {
                self.system_line(&format!("[warning] {}: {}", event.str_field("source"), event.str_field("message")), &mut out);
            }
            EventKind::SessionEnd => {
                self.block = None;
                out.push_str(&format!("\nSession {} after {} iterations.\n", event.str_field("status"), event.u64_field("iterations")));
                if let Some(err) = p.get("error").and_then(Value::as_str) {
                    out.push_str(&format!("Error: {err}\n"));
                }
                let final_output = event.str_field("final_output");
                if !final_output.is_empty() {
                    out.push_str(final_output);
                    out.push('\n');
                }
            }
            _ => {}
        }
        out
    }
}

/// Render a whole trajectory.
pub fn replay(trajectory: &Trajectory) -> String {
    let mut view = UserView::new();
    trajectory.events().iter().map(|e| view.render(e)).collect()
}

/// Streams the user view to a writer as events are recorded.
pub struct UserViewSink<W: Write + Send> {
    view: UserView,
    writer: W,
}

impl<W: Write + Send> UserViewSink<W> {
    pub fn new(writer: W) -> Self {
        Self { view: UserView::new(), writer }
    }
}

impl<W: Write + Send> EventSink for UserViewSink<W> {
    fn on_event(&mut self, event: &Event) -> io::Result<()> {
        let text = self.view.render(event);
        if !text.is_empty() {
            self.writer.write_all(text.as_bytes())?;
            self.writer.flush()?;
        }
        Ok(())
    }
}
