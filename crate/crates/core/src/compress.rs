//! Threshold-triggered history compression.
//!
//! When the agent-channel history grows past `trigger_threshold` tokens, an
//! architect model summarizes every compressible message older than the
//! recent window. The result replaces those messages:
//!
//! ```text
//! [kept older messages] [summary] [recent window, verbatim]
//! ```
//!
//! Kept older messages are the protected ones (system role, pinned task).
//! Earlier summaries are compressible and fold into the new one.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{self, Backend, CallRole, LlmError, LlmRequest};
use crate::message::{agent_transcript, total_tokens, Channel, ContentBlock, Message, Role};
use crate::trajectory::{EventKind, Recorder};

pub const DEFAULT_CONTEXT_SIZE: u64 = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionPolicy {
    pub trigger_threshold: u64,
    pub target_after: u64,
    pub recent_window: usize,
    pub protected_roles: Vec<Role>,
    /// Model used for summaries; the session's own model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architect_model_ref: Option<String>,
    pub max_retries: u32,
}

impl CompressionPolicy {
    pub fn for_context(context_size: u64) -> Self {
        Self {
            trigger_threshold: context_size * 8 / 10,
            target_after: context_size / 2,
            recent_window: 10,
            protected_roles: vec![Role::System],
            architect_model_ref: None,
            max_retries: 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target_after >= self.trigger_threshold {
            return Err(format!("target_after ({}) must be below trigger_threshold ({})", self.target_after, self.trigger_threshold));
        }
        if self.recent_window == 0 {
            return Err("recent_window must be at least 1".into());
        }
        if !self.protected_roles.contains(&Role::System) {
            return Err("protected_roles must include system".into());
        }
        Ok(())
    }

    fn protects(&self, msg: &Message) -> bool {
        !msg.compressible || self.protected_roles.contains(&msg.role)
    }
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self::for_context(DEFAULT_CONTEXT_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextStep {
    pub sequence_num: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub thinking: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issues: Option<String>,
    pub next_steps: Vec<NextStep>,
}

/// Architect output with its fixed section schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSummary {
    pub conversation_context: String,
    pub technical_decisions: String,
    pub implementation_progress: String,
    pub technical_details: String,
    pub outstanding_items: String,
    pub plan: Plan,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SummaryError {
    #[error("missing <summary> block")]
    MissingSummary,
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("section [{0}] is empty")]
    EmptySection(&'static str),
    #[error("missing <plan> block")]
    MissingPlan,
    #[error("plan has no <thinking>")]
    MissingThinking,
    #[error("plan has no <next_step>")]
    NoNextStep,
}

const SECTIONS: [&str; 5] =
    ["CONVERSATION CONTEXT", "TECHNICAL DECISIONS", "IMPLEMENTATION PROGRESS", "TECHNICAL DETAILS", "OUTSTANDING ITEMS"];

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*\[([A-Za-z][A-Za-z ]*)\][ \t]*$").expect("section regex"))
}

fn next_step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?s)<next_step(?:\s+sequence_num="(\d+)")?\s*>(.*?)</next_step>"#).expect("next_step regex")
    })
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

impl StructuredSummary {
    /// Parse architect output. Section headers match case-insensitively and
    /// a trailing `</plan>` may be missing.
    pub fn parse(text: &str) -> Result<Self, SummaryError> {
        let summary = between(text, "<summary>", "</summary>").ok_or(SummaryError::MissingSummary)?;
        let headers: Vec<(usize, usize, String)> = section_re()
            .captures_iter(summary)
            .map(|c| {
                let m = c.get(0).expect("match");
                (m.start(), m.end(), c[1].trim().to_ascii_uppercase())
            })
            .collect();
        let mut sections: [Option<String>; 5] = Default::default();
        for (i, (_, end, name)) in headers.iter().enumerate() {
            let stop = headers.get(i + 1).map_or(summary.len(), |h| h.0);
            if let Some(slot) = SECTIONS.iter().position(|s| s == name) {
                sections[slot].get_or_insert_with(|| summary[*end..stop].trim().to_string());
            }
        }
        let mut out = Vec::with_capacity(5);
        for (slot, name) in sections.into_iter().zip(SECTIONS) {
            let body = slot.ok_or(SummaryError::MissingSection(name))?;
            if body.is_empty() {
                return Err(SummaryError::EmptySection(name));
            }
            out.push(body);
        }

        let after = &text[text.find("</summary>").expect("summary closed") + "</summary>".len()..];
        let plan_start = after.find("<plan>").ok_or(SummaryError::MissingPlan)? + "<plan>".len();
        let plan = &after[plan_start..];
        let plan = plan.find("</plan>").map_or(plan, |end| &plan[..end]);
        let thinking = between(plan, "<thinking>", "</thinking>").map(str::trim).ok_or(SummaryError::MissingThinking)?;
        let issues = between(plan, "<issues>", "</issues>").map(|s| s.trim().to_string());
        let mut next_steps = Vec::new();
        for (i, cap) in next_step_re().captures_iter(plan).enumerate() {
            let sequence_num = cap.get(1).and_then(|m| m.as_str().parse().ok()).unwrap_or(i as u32 + 1);
            next_steps.push(NextStep { sequence_num, text: cap[2].trim().to_string() });
        }
        if next_steps.is_empty() {
            return Err(SummaryError::NoNextStep);
        }
        let mut it = out.into_iter();
        let mut next = || it.next().expect("five sections");
        Ok(Self {
            conversation_context: next(),
            technical_decisions: next(),
            implementation_progress: next(),
            technical_details: next(),
            outstanding_items: next(),
            plan: Plan { thinking: thinking.to_string(), issues, next_steps },
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::from("<summary>\n");
        for (name, body) in SECTIONS.iter().zip(self.sections()) {
            out.push_str(&format!("[{name}]\n{body}\n\n"));
        }
        out.truncate(out.len() - 1);
        out.push_str("</summary>\n<plan>\n");
        out.push_str(&format!("<thinking>\n{}\n</thinking>\n", self.plan.thinking));
        if let Some(issues) = &self.plan.issues {
            out.push_str(&format!("<issues>\n{issues}\n</issues>\n"));
        }
        for step in &self.plan.next_steps {
            out.push_str(&format!("<next_step sequence_num=\"{}\">\n{}\n</next_step>\n", step.sequence_num, step.text));
        }
        out.push_str("</plan>");
        out
    }

    pub fn sections(&self) -> [&str; 5] {
        [
            &self.conversation_context,
            &self.technical_decisions,
            &self.implementation_progress,
            &self.technical_details,
            &self.outstanding_items,
        ]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressError {
    #[error("nothing to compress: every message outside the recent window is protected")]
    SpanEmpty,
    #[error("architect summary invalid after {attempts} attempts: {last}")]
    SchemaInvalid { attempts: u32, last: SummaryError },
    #[error("architect call failed: {0}")]
    Backend(#[from] LlmError),
}

pub fn should_compress(history: &[Message], policy: &CompressionPolicy) -> bool {
    total_tokens(history) > policy.trigger_threshold
}

/// Indices of the messages to fold into a summary, ascending.
pub fn select_span(history: &[Message], policy: &CompressionPolicy) -> Result<Vec<usize>, CompressError> {
    let older = history.len().saturating_sub(policy.recent_window);
    let span: Vec<usize> = (0..older).filter(|&i| !policy.protects(&history[i])).collect();
    if span.is_empty() {
        return Err(CompressError::SpanEmpty);
    }
    Ok(span)
}

/// Corrective instruction appended after an invalid summary.
pub fn corrective_instruction(err: &SummaryError) -> String {
    format!(
        "That summary was rejected ({err}). Reply again with the full structure: all five bracketed sections non-empty inside <summary>, then a <plan> with <thinking> and at least one <next_step>."
    )
}

/// Ask the architect for a summary of the older, non-window history.
///
/// The architect sees the kept older messages and the span, not the window.
pub fn summarize(
    history: &[Message],
    span: &[usize],
    policy: &CompressionPolicy,
    architect: &dyn Backend,
    system_prompt: &str,
    recorder: &mut Recorder,
) -> Result<StructuredSummary, CompressError> {
    assert!(!span.is_empty(), "summarize called with an empty span");
    let older = history.len().saturating_sub(policy.recent_window);
    let visible: Vec<Message> = history[..older].to_vec();
    let mut messages = vec![Message::text(0, Role::User, format!("Conversation to summarize:\n\n{}", agent_transcript(&visible)))];
    let mut last = None;
    for attempt in 0..=policy.max_retries {
        let mut req = LlmRequest::new(system_prompt, messages.clone());
        req.max_output_tokens = 8192;
        let resp = llm::complete(architect, &req, recorder, CallRole::Architect)?;
        match StructuredSummary::parse(&resp.text) {
            Ok(s) => return Ok(s),
            Err(e) => {
                recorder.warn("context_compressor", format!("architect attempt {} rejected: {e}", attempt + 1));
                messages.push(Message::text(0, Role::Assistant, resp.text));
                messages.push(Message::text(0, Role::User, corrective_instruction(&e)));
                last = Some(e);
            }
        }
    }
    Err(CompressError::SchemaInvalid { attempts: policy.max_retries + 1, last: last.expect("at least one attempt") })
}

/// The summary as a history message.
pub fn summary_message(seq: u64, summary: &StructuredSummary) -> Message {
    let mut msg = Message::new(seq, Role::ToolResult, Channel::Agent, vec![ContentBlock::Text(summary.render())]);
    msg.summary = Some(summary.clone());
    msg
}

/// Replace the span with `summary`, keeping protected older messages and the
/// window untouched.
pub fn apply(history: &[Message], span: &[usize], summary: Message, policy: &CompressionPolicy) -> Vec<Message> {
    apply_at(history, history.len().saturating_sub(policy.recent_window), span, summary)
}

/// [`apply`] with the window boundary given explicitly, as recorded in a
/// compression event.
pub fn apply_at(history: &[Message], older: usize, span: &[usize], summary: Message) -> Vec<Message> {
    let older = older.min(history.len());
    let mut out: Vec<Message> = (0..older).filter(|i| span.binary_search(i).is_err()).map(|i| history[i].clone()).collect();
    out.push(summary);
    out.extend_from_slice(&history[older..]);
    out
}

/// Result of one compression pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Compression {
    pub history: Vec<Message>,
    pub pre_tokens: u64,
    pub post_tokens: u64,
}

/// Select, summarize, apply, and log one compression.
pub fn compress(
    history: &[Message],
    policy: &CompressionPolicy,
    architect: &dyn Backend,
    system_prompt: &str,
    recorder: &mut Recorder,
) -> Result<Compression, CompressError> {
    let span = select_span(history, policy)?;
    let summary = summarize(history, &span, policy, architect, system_prompt, recorder)?;
    let older = history.len().saturating_sub(policy.recent_window);
    let pre_tokens = total_tokens(history);
    let span_tokens: u64 = span.iter().map(|&i| history[i].token_estimate()).sum();
    let mut new_history = apply_at(history, older, &span, summary_message(0, &summary));
    let post_tokens = total_tokens(&new_history);
    let seq = recorder.record(
        EventKind::Compression,
        json!({
            "pre_tokens": pre_tokens,
            "post_tokens": post_tokens,
            "older_len": older,
            "span_indices": span,
            "span_first_seq": history[span[0]].seq,
            "span_last_seq": history[*span.last().expect("span")].seq,
            "span_tokens": span_tokens,
            "summary_text": summary.render(),
            "summary": summary,
        }),
    );
    let at = older - span.len();
    new_history[at].seq = seq;
    new_history[at].origin = Some(seq);
    if post_tokens >= pre_tokens {
        recorder.warn("context_compressor", format!("compression did not shrink history ({pre_tokens} -> {post_tokens} tokens)"));
    }
    if post_tokens > policy.target_after {
        recorder.warn(
            "context_compressor",
            format!("history is {post_tokens} tokens after compression, above target {}", policy.target_after),
        );
    }
    Ok(Compression { history: new_history, pre_tokens, post_tokens })
}
