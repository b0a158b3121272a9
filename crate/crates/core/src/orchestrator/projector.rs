//! Agent-channel history as a fold over trajectory events.
//!
//! The live loop and replay both build history through [`HistoryProjector`],
//! so a stored trajectory always reproduces the exact messages the model
//! saw.

use std::ops::Range;

use serde_json::Value;

use crate::codec::{encode_xml, render_result, Action, Origin, ToolOutcome};
use crate::compress::{apply_at, summary_message, StructuredSummary};
use crate::message::{Channel, ContentBlock, Message, Role};
use crate::trajectory::{Event, EventKind, Trajectory};

/// Append a native call to rendered assistant text; returns its span.
pub fn append_native(raw: &mut String, action: &Action) -> Range<usize> {
    if !raw.is_empty() {
        raw.push('\n');
    }
    let start = raw.len();
    let markup = encode_xml(action).unwrap_or_else(|_| {
        let mut a = action.clone();
        a.body = a.body.replace(&format!("</{}>", a.name), "");
        encode_xml(&a).unwrap_or_default()
    });
    raw.push_str(&markup);
    start..raw.len()
}

/// Text the model is told when its reply does not parse.
pub fn parse_error_text(error: &str) -> String {
    format!("Your reply could not be parsed: {error}. Fix the tool markup and try again.")
}

/// Agent view of a single event, when it maps to exactly one new message.
pub fn agent_view(event: &Event) -> Option<Message> {
    match event.kind {
        EventKind::UserMessage => {
            let msg = Message::text(event.seq, Role::User, event.str_field("text"));
            Some(if event.payload.get("pinned").and_then(Value::as_bool).unwrap_or(false) { msg.pinned() } else { msg })
        }
        EventKind::ActionExecuted if event.payload.get("agent_text").is_some() => {
            let outcome = ToolOutcome::success(event.str_field("agent_text"), "");
            Some(render_result(event.seq, &outcome))
        }
        EventKind::ValidationReject if event.str_field("source") == "parse" => {
            Some(render_result(event.seq, &ToolOutcome::error(event.str_field("agent_text"), "")))
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Default)]
struct Turn {
    /// Index of the assistant message in history.
    index: usize,
    raw: String,
    spans: Vec<(usize, Range<usize>)>,
    elisions: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct HistoryProjector {
    history: Vec<Message>,
    applied: u64,
    turn: Option<Turn>,
}

impl HistoryProjector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history(&self) -> &[Message] {
        &self.history
    }

    /// Apply every event not yet seen.
    pub fn catch_up(&mut self, trajectory: &Trajectory) -> &[Message] {
        let from = self.applied as usize;
        for event in &trajectory.events()[from.min(trajectory.len())..] {
            self.apply(event);
        }
        &self.history
    }

    pub fn apply(&mut self, event: &Event) {
        self.applied = event.seq + 1;
        match event.kind {
            EventKind::LlmResponse => {
                if event.str_field("role") != "agent" || event.payload.get("error").is_some() {
                    return;
                }
                let text = event.str_field("text").to_string();
                self.history.push(Message::new(event.seq, Role::Assistant, Channel::Agent, vec![ContentBlock::Text(text.clone())]));
                self.turn = Some(Turn { index: self.history.len() - 1, raw: text, ..Turn::default() });
            }
            EventKind::Warning => {
                if let Some(rewritten) = event.payload.get("rewritten_text").and_then(Value::as_str) {
                    if let Some(turn) = &mut self.turn {
                        turn.raw = rewritten.to_string();
                        self.refresh_turn();
                    }
                }
            }
            EventKind::ActionParsed => {
                let Some(action) = event.payload.get("action").and_then(|a| serde_json::from_value::<Action>(a.clone()).ok()) else { return };
                let index = event.u64_field("index") as usize;
                if let Some(turn) = &mut self.turn {
                    if action.origin == Origin::Native {
                        let span = append_native(&mut turn.raw, &action);
                        turn.spans.push((index, span));
                        self.refresh_turn();
                    } else if let Some(span) = action.span {
                        turn.spans.push((index, span));
                    }
                }
            }
            EventKind::ActionExecuted => {
                if let (Some(markup), Some(turn)) = (event.payload.get("elided_markup").and_then(Value::as_str), &mut self.turn) {
                    turn.elisions.push((event.u64_field("index") as usize, markup.to_string()));
                    self.refresh_turn();
                }
                if let Some(msg) = agent_view(event) {
                    self.history.push(msg);
                }
            }
            EventKind::Compression => {
                let Some(summary) = event.payload.get("summary").and_then(|s| serde_json::from_value::<StructuredSummary>(s.clone()).ok()) else { return };
                let older = event.u64_field("older_len") as usize;
                let span: Vec<usize> = event
                    .payload
                    .get("span_indices")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
                    .unwrap_or_default();
                self.history = apply_at(&self.history, older, &span, summary_message(event.seq, &summary));
                // compression runs between turns, so no turn is open
                self.turn = None;
            }
            _ => {
                if let Some(msg) = agent_view(event) {
                    self.history.push(msg);
                }
            }
        }
    }

    fn refresh_turn(&mut self) {
        let Some(turn) = &self.turn else { return };
        let mut text = turn.raw.clone();
        let mut edits: Vec<(Range<usize>, &str)> = turn
            .elisions
            .iter()
            .filter_map(|(idx, markup)| turn.spans.iter().find(|(i, _)| i == idx).map(|(_, s)| (s.clone(), markup.as_str())))
            .filter(|(s, _)| s.end <= text.len() && text.is_char_boundary(s.start) && text.is_char_boundary(s.end))
            .collect();
        edits.sort_by(|a, b| b.0.start.cmp(&a.0.start));
        for (span, markup) in edits {
            text.replace_range(span, markup);
        }
        if let Some(msg) = self.history.get_mut(turn.index) {
            msg.set_content(vec![ContentBlock::Text(text)]);
        }
    }
}

/// Agent-channel history reconstructed from a trajectory.
pub fn project_history(trajectory: &Trajectory) -> Vec<Message> {
    let mut p = HistoryProjector::new();
    p.catch_up(trajectory);
    p.history
}
