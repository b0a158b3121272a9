//! Agent-visible conversation messages.

use serde::{Deserialize, Serialize};

use crate::compress::StructuredSummary;
use crate::tokens::estimate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    ToolResult,
}

impl Role {
    /// Speaker prefix used in the agent-channel transcript.
    pub fn speaker(self) -> &'static str {
        match self {
            Role::System => "System",
            Role::Assistant => "AI",
            Role::User | Role::ToolResult => "Human",
        }
    }
}

/// Audience of a message: the model, the human, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Agent,
    User,
    Both,
}

impl Channel {
    pub fn reaches_agent(self) -> bool {
        matches!(self, Channel::Agent | Channel::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "text", rename_all = "snake_case")]
pub enum ContentBlock {
    Text(String),
    ActionMarkup(String),
    ResultMarkup(String),
}

impl ContentBlock {
    pub fn as_str(&self) -> &str {
        match self {
            ContentBlock::Text(s) | ContentBlock::ActionMarkup(s) | ContentBlock::ResultMarkup(s) => s,
        }
    }
}

/// One turn of the agent-channel conversation.
///
/// `token_estimate` is always the estimate of [`Message::rendered`]; every
/// constructor and mutator keeps it in sync.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub role: Role,
    pub channel: Channel,
    content: Vec<ContentBlock>,
    token_estimate: u64,
    pub compressible: bool,
    /// Sequence number of the trajectory event that produced this message.
    pub origin: Option<u64>,
    /// Machine-readable section map when this message is a compression summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<StructuredSummary>,
}

impl Message {
    pub fn new(seq: u64, role: Role, channel: Channel, content: Vec<ContentBlock>) -> Self {
        let mut msg = Self {
            seq,
            role,
            channel,
            content,
            token_estimate: 0,
            compressible: role != Role::System,
            origin: Some(seq),
            summary: None,
        };
        msg.token_estimate = estimate_tokens(&msg.rendered());
        msg
    }

    pub fn text(seq: u64, role: Role, text: impl Into<String>) -> Self {
        Self::new(seq, role, Channel::Agent, vec![ContentBlock::Text(text.into())])
    }

    pub fn pinned(mut self) -> Self {
        self.compressible = false;
        self
    }

    pub fn content(&self) -> &[ContentBlock] {
        &self.content
    }

    pub fn token_estimate(&self) -> u64 {
        self.token_estimate
    }

    /// Replace the content blocks, recomputing the token estimate.
    pub fn set_content(&mut self, content: Vec<ContentBlock>) {
        self.content = content;
        self.token_estimate = estimate_tokens(&self.rendered());
    }

    /// The text the model receives for this message.
    pub fn rendered(&self) -> String {
        self.content.iter().map(ContentBlock::as_str).collect::<Vec<_>>().join("\n")
    }
}

/// Sum of token estimates over a message list.
pub fn total_tokens(messages: &[Message]) -> u64 {
    messages.iter().map(Message::token_estimate).sum()
}

/// Render messages as the `Human:` / `AI:` transcript the agent sees.
pub fn agent_transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for msg in messages.iter().filter(|m| m.channel.reaches_agent()) {
        out.push_str(msg.role.speaker());
        out.push_str(": ");
        out.push_str(&msg.rendered());
        out.push('\n');
    }
    out
}
