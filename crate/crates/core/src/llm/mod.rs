//! Uniform interface to language-model backends.
//!
//! Backends are chosen by a `model_ref` string:
//!
//! | model_ref              | backend                                          |
//! |------------------------|--------------------------------------------------|
//! | `scripted:<path>`      | [`ScriptedBackend`] loaded from a JSON script    |
//! | `scripted`             | scripted, with the script supplied per task      |
//! | `reference-notes`      | deterministic note-taking backend                |
//! | `anthropic:<model>`    | [`HttpBackend`] against the Messages API         |
//!
//! [`complete`] wraps every backend call with the `llm_request` /
//! `llm_response` trajectory events.

mod http;
mod scripted;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::codec::ToolSchema;
use crate::message::{Message, Role};
use crate::tokens::estimate_tokens;
use crate::trajectory::{EventKind, Recorder};

pub use http::{from_wire, redact, to_wire, HttpBackend, API_KEY_ENV};
pub use scripted::{Matcher, Script, ScriptEntry, ScriptedBackend, ScriptedResponse};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("thinking budget {budget} rejected: {reason}")]
    BudgetRejected { budget: u32, reason: String },
    #[error("script exhausted after {served} responses")]
    ScriptExhausted { served: usize },
    #[error("no remaining script entry matches the request ({remaining} unserved)")]
    MatcherMiss { remaining: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("unknown model_ref `{0}`")]
    UnknownModel(String),
    #[error("cannot load backend: {0}")]
    Load(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Xml,
    Native,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NativeCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub thinking_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub tool_schemas: Option<Vec<ToolSchema>>,
    pub thinking_budget: u32,
    pub max_output_tokens: u32,
}

impl LlmRequest {
    pub fn new(system_prompt: impl Into<String>, messages: Vec<Message>) -> Self {
        Self { system_prompt: system_prompt.into(), messages, tool_schemas: None, thinking_budget: 0, max_output_tokens: 4096 }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if let Some(m) = self.messages.iter().find(|m| !m.channel.reaches_agent()) {
            return Err(LlmError::InvalidRequest(format!("message seq {} is user-channel only", m.seq)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Conversation text (excluding the system prompt), as matched by scripts.
    pub fn conversation_text(&self) -> String {
        self.messages.iter().map(Message::rendered).collect::<Vec<_>>().join("\n")
    }

    pub fn system_tokens(&self) -> u64 {
        estimate_tokens(&self.system_prompt)
    }

    pub fn message_tokens(&self) -> u64 {
        self.messages.iter().map(Message::token_estimate).sum()
    }
}

/// Request/response bodies exchanged with a remote provider, credentials
/// already redacted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireExchange {
    pub request: Value,
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LlmResponse {
    pub text: String,
    pub native_calls: Vec<NativeCall>,
    pub usage: Usage,
    pub wire: Option<WireExchange>,
}

impl LlmResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Self::default() }
    }
}

pub trait Backend: Send + Sync {
    fn model_ref(&self) -> &str;

    /// Whether a nonzero thinking budget is passed through to the model.
    fn supports_thinking_budget(&self) -> bool {
        false
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

/// Which part of the system issued a model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallRole {
    Agent,
    Architect,
    NoteTaker,
    Meta,
}

impl CallRole {
    pub fn as_str(self) -> &'static str {
        match self {
            CallRole::Agent => "agent",
            CallRole::Architect => "architect",
            CallRole::NoteTaker => "note_taker",
            CallRole::Meta => "meta",
        }
    }
}

/// Call `backend`, logging exactly one `llm_request` and one `llm_response`.
pub fn complete(
    backend: &dyn Backend,
    request: &LlmRequest,
    recorder: &mut Recorder,
    role: CallRole,
) -> Result<LlmResponse, LlmError> {
    request.validate()?;
    let mut effective = None;
    if request.thinking_budget > 0 && !backend.supports_thinking_budget() {
        recorder.warn(
            "llm_gateway",
            format!("backend `{}` ignores thinking budgets; {} recorded but not applied", backend.model_ref(), request.thinking_budget),
        );
        let mut r = request.clone();
        r.thinking_budget = 0;
        effective = Some(r);
    }
    let sent = effective.as_ref().unwrap_or(request);
    recorder.record(
        EventKind::LlmRequest,
        json!({
            "role": role.as_str(),
            "model_ref": backend.model_ref(),
            "thinking_budget": request.thinking_budget,
            "thinking_budget_applied": sent.thinking_budget,
            "max_output_tokens": request.max_output_tokens,
            "message_count": request.messages.len(),
            "system_tokens": request.system_tokens(),
            "message_tokens": request.message_tokens(),
            "tool_count": request.tool_schemas.as_ref().map_or(0, Vec::len),
        }),
    );
    let result = backend.complete(sent);
    let payload = match &result {
        Ok(resp) => {
            let mut p = json!({
                "role": role.as_str(),
                "text": resp.text,
                "native_calls": resp.native_calls,
                "usage": resp.usage,
            });
            if let Some(wire) = &resp.wire {
                p["wire"] = json!({ "request": redact(&wire.request), "response": redact(&wire.response) });
            }
            p
        }
        Err(e) => json!({ "role": role.as_str(), "error": e.to_string(), "retryable": e.is_retryable() }),
    };
    recorder.record(EventKind::LlmResponse, payload);
    result
}

/// Like [`complete`], retrying transport errors up to `retries` times.
pub fn complete_with_retries(
    backend: &dyn Backend,
    request: &LlmRequest,
    recorder: &mut Recorder,
    role: CallRole,
    retries: u32,
) -> Result<LlmResponse, LlmError> {
    let mut attempt = 0;
    loop {
        match complete(backend, request, recorder, role) {
            Err(e) if e.is_retryable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// Syntactic check of a model_ref, used at config load time.
pub fn validate_model_ref(model_ref: &str) -> Result<(), LlmError> {
    match model_ref.split_once(':') {
        None if model_ref == "scripted" || model_ref == "reference-notes" => Ok(()),
        Some(("scripted", path)) if !path.is_empty() => Ok(()),
        Some(("anthropic", model)) if !model.is_empty() => Ok(()),
        _ => Err(LlmError::UnknownModel(model_ref.to_string())),
    }
}

/// Instantiate the backend named by `model_ref`.
///
/// Relative script paths resolve against `base_dir`. `task_script` supplies
/// the script for the bare `scripted` ref.
pub fn resolve_backend(model_ref: &str, base_dir: &Path, task_script: Option<&Path>) -> Result<Arc<dyn Backend>, LlmError> {
    validate_model_ref(model_ref)?;
    match model_ref.split_once(':') {
        None if model_ref == "reference-notes" => Ok(Arc::new(crate::notes::ReferenceNoteBackend)),
        None => {
            let path = task_script.ok_or_else(|| LlmError::Load("bare `scripted` model_ref needs a task script".into()))?;
            Ok(Arc::new(ScriptedBackend::load(path)?))
        }
        Some(("scripted", path)) => Ok(Arc::new(ScriptedBackend::load(&base_dir.join(path))?)),
        Some(("anthropic", model)) => Ok(Arc::new(HttpBackend::from_env(model)?)),
        _ => Err(LlmError::UnknownModel(model_ref.to_string())),
    }
}

/// Map a message role onto the provider's two-party conversation.
pub(crate) fn wire_role(role: Role) -> &'static str {
    match role {
        Role::Assistant => "assistant",
        _ => "user",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{FixedClock, Trajectory};
    use crate::message::Channel;

    fn recorder() -> Recorder {
        Recorder::new(Trajectory::new("s", "c"), Arc::new(FixedClock::default()))
    }

    fn script(texts: &[&str]) -> ScriptedBackend {
        ScriptedBackend::new(Script {
            entries: texts.iter().map(|t| ScriptEntry::always(ScriptedResponse::text(*t))).collect(),
        })
    }

    #[test]
    fn scripted_step_k_is_kth_response() {
        let backend = script(&["one", "two"]);
        let mut rec = recorder();
        let req = LlmRequest::new("sys", vec![]);
        assert_eq!(complete(&backend, &req, &mut rec, CallRole::Agent).unwrap().text, "one");
        assert_eq!(complete(&backend, &req, &mut rec, CallRole::Agent).unwrap().text, "two");
        assert_eq!(rec.trajectory().of_kind(EventKind::LlmRequest).count(), 2);
        assert_eq!(rec.trajectory().of_kind(EventKind::LlmResponse).count(), 2);
    }

    #[test]
    fn exhausted_script_errors_and_still_logs() {
        let backend = script(&["only"]);
        let mut rec = recorder();
        let req = LlmRequest::new("sys", vec![]);
        complete(&backend, &req, &mut rec, CallRole::Agent).unwrap();
        let err = complete(&backend, &req, &mut rec, CallRole::Agent).unwrap_err();
        assert_eq!(err, LlmError::ScriptExhausted { served: 1 });
        assert_eq!(rec.trajectory().of_kind(EventKind::LlmResponse).count(), 2);
    }

    #[test]
    fn zero_budget_zero_thinking() {
        let backend = script(&["x"]);
        let mut rec = recorder();
        let resp = complete(&backend, &LlmRequest::new("s", vec![]), &mut rec, CallRole::Agent).unwrap();
        assert_eq!(resp.usage.thinking_tokens, 0);
    }

    #[test]
    fn budgets_are_recorded() {
        for budget in [8000u32, 16000, 32000] {
            let mut entry = ScriptedResponse::text("x");
            entry.thinking_tokens = 50_000;
            let backend = ScriptedBackend::new(Script { entries: vec![ScriptEntry::always(entry)] });
            let mut rec = recorder();
            let mut req = LlmRequest::new("s", vec![]);
            req.thinking_budget = budget;
            req.max_output_tokens = 64_000;
            let resp = complete(&backend, &req, &mut rec, CallRole::Agent).unwrap();
            assert!(resp.usage.thinking_tokens <= budget as u64);
            let ev = rec.trajectory().of_kind(EventKind::LlmRequest).next().unwrap();
            assert_eq!(ev.u64_field("thinking_budget"), budget as u64);
            assert_eq!(ev.u64_field("thinking_budget_applied"), budget as u64);
        }
    }

    struct NoBudget;
    impl Backend for NoBudget {
        fn model_ref(&self) -> &str {
            "nobudget"
        }
        fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
            assert_eq!(request.thinking_budget, 0);
            Ok(LlmResponse::text("ok"))
        }
    }

    #[test]
    fn unsupported_budget_warns_and_is_ignored() {
        let mut rec = recorder();
        let mut req = LlmRequest::new("s", vec![]);
        req.thinking_budget = 16000;
        complete(&NoBudget, &req, &mut rec, CallRole::Agent).unwrap();
        assert_eq!(rec.trajectory().of_kind(EventKind::Warning).count(), 1);
        let ev = rec.trajectory().of_kind(EventKind::LlmRequest).next().unwrap();
        assert_eq!(ev.u64_field("thinking_budget"), 16000);
        assert_eq!(ev.u64_field("thinking_budget_applied"), 0);
    }

    struct Flaky(std::sync::Mutex<u32>);
    impl Backend for Flaky {
        fn model_ref(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &LlmRequest) -> Result<LlmResponse, LlmError> {
            let mut n = self.0.lock().unwrap();
            *n += 1;
            if *n < 3 {
                Err(LlmError::Transport("reset".into()))
            } else {
                Ok(LlmResponse::text("finally"))
            }
        }
    }

    #[test]
    fn transport_errors_retry() {
        let mut rec = recorder();
        let resp = complete_with_retries(&Flaky(Default::default()), &LlmRequest::new("s", vec![]), &mut rec, CallRole::Agent, 2)
            .unwrap();
        assert_eq!(resp.text, "finally");
        assert_eq!(rec.trajectory().of_kind(EventKind::LlmResponse).count(), 3);
        let mut rec = recorder();
        assert!(complete_with_retries(&Flaky(Default::default()), &LlmRequest::new("s", vec![]), &mut rec, CallRole::Agent, 1)
            .is_err());
    }

    #[test]
    fn user_only_messages_rejected() {
        let mut m = Message::text(0, Role::User, "x");
        m.channel = Channel::User;
        let req = LlmRequest::new("s", vec![m]);
        assert!(matches!(req.validate(), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn model_ref_validation() {
        assert!(validate_model_ref("scripted:foo.json").is_ok());
        assert!(validate_model_ref("scripted").is_ok());
        assert!(validate_model_ref("anthropic:claude-sonnet-4").is_ok());
        assert!(validate_model_ref("reference-notes").is_ok());
        assert!(validate_model_ref("gpt-magic").is_err());
        assert!(validate_model_ref("scripted:").is_err());
    }
}
