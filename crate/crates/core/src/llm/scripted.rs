//! Deterministic scripted backend for offline runs.
//!
//! A script is an ordered list of entries. Each call serves the first
//! unserved entry whose matcher accepts the request's conversation text;
//! `repeat` entries are never used up. Script files are JSON:
//!
//! ```json
//! { "entries": [
//!     { "when": { "contains": "<result>" }, "response": { "text": "<bash>ls</bash>" } },
//!     { "repeat": true, "response": { "text": "done" } }
//! ] }
//! ```

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, LlmError, LlmRequest, LlmResponse, NativeCall, Usage};
use crate::tokens::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Contains(String),
    NotContains(String),
    All(Vec<Matcher>),
}

impl Matcher {
    pub fn matches(&self, haystack: &str) -> bool {
        match self {
            Matcher::Contains(s) => haystack.contains(s.as_str()),
            Matcher::NotContains(s) => !haystack.contains(s.as_str()),
            Matcher::All(ms) => ms.iter().all(|m| m.matches(haystack)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub native_calls: Vec<NativeCall>,
    /// Thinking tokens the model "would" spend; capped by the request budget.
    #[serde(default)]
    pub thinking_tokens: u64,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub when: Option<Matcher>,
    #[serde(default)]
    pub repeat: bool,
    pub response: ScriptedResponse,
}

impl ScriptEntry {
    pub fn always(response: ScriptedResponse) -> Self {
        Self { when: None, repeat: false, response }
    }

    pub fn when(matcher: Matcher, response: ScriptedResponse) -> Self {
        Self { when: Some(matcher), repeat: false, response }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Load(format!("invalid script: {e}")))
    }
}

#[derive(Debug)]
struct State {
    used: Vec<bool>,
    served: Vec<usize>,
}

/// Serves scripted responses in order. Calls are serialized internally so
/// concurrent callers still observe script order.
#[derive(Debug)]
pub struct ScriptedBackend {
    model_ref: String,
    script: Script,
    state: Mutex<State>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self::named("scripted", script)
    }

    pub fn named(model_ref: impl Into<String>, script: Script) -> Self {
        let n = script.entries.len();
        Self { model_ref: model_ref.into(), script, state: Mutex::new(State { used: vec![false; n], served: Vec::new() }) }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Load(format!("{}: {e}", path.display())))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Self::named(format!("scripted:{name}"), Script::from_json(&text)?))
    }

    /// Indices of the script entries served so far, in order.
    pub fn served(&self) -> Vec<usize> {
        self.state.lock().expect("script state").served.clone()
    }
}

impl Backend for ScriptedBackend {
    fn model_ref(&self) -> &str {
        &self.model_ref
    }

    fn supports_thinking_budget(&self) -> bool {
        true
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut state = self.state.lock().expect("script state");
        let haystack = request.conversation_text();
        let available: Vec<usize> =
            (0..self.script.entries.len()).filter(|&i| self.script.entries[i].repeat || !state.used[i]).collect();
        if available.is_empty() {
            return Err(LlmError::ScriptExhausted { served: state.served.len() });
        }
        let idx = available
            .iter()
            .copied()
            .find(|&i| self.script.entries[i].when.as_ref().is_none_or(|m| m.matches(&haystack)))
            .ok_or(LlmError::MatcherMiss { remaining: available.len() })?;
        state.used[idx] = true;
        state.served.push(idx);
        let entry = &self.script.entries[idx].response;
        let calls_text = serde_json::to_string(&entry.native_calls).unwrap_or_default();
        let usage = Usage {
            input_tokens: request.system_tokens() + request.message_tokens(),
            output_tokens: estimate_tokens(&entry.text) + if entry.native_calls.is_empty() { 0 } else { estimate_tokens(&calls_text) },
            thinking_tokens: entry.thinking_tokens.min(request.thinking_budget as u64),
        };
        Ok(LlmResponse { text: entry.text.clone(), native_calls: entry.native_calls.clone(), usage, wire: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{Message, Role};

    fn req(text: &str) -> LlmRequest {
        LlmRequest::new("system mentions <file_edit", vec![Message::text(0, Role::User, text)])
    }

    #[test]
    fn matcher_serves_only_matching_request() {
        let backend = ScriptedBackend::new(Script {
            entries: vec![ScriptEntry::when(Matcher::Contains("<file_edit".into()), ScriptedResponse::text("edit seen"))],
        });
        // the system prompt is not part of the matched text
        assert_eq!(backend.complete(&req("plain")).unwrap_err(), LlmError::MatcherMiss { remaining: 1 });
        assert_eq!(backend.complete(&req("has <file_edit type=\"x\">")).unwrap().text, "edit seen");
    }

    #[test]
    fn skips_non_matching_entries_in_order() {
        let backend = ScriptedBackend::new(Script {
            entries: vec![
                ScriptEntry::when(Matcher::Contains("NOTES".into()), ScriptedResponse::text("short")),
                ScriptEntry::when(Matcher::NotContains("NOTES".into()), ScriptedResponse::text("long-1")),
                ScriptEntry::always(ScriptedResponse::text("end")),
            ],
        });
        assert_eq!(backend.complete(&req("x")).unwrap().text, "long-1");
        assert_eq!(backend.complete(&req("x")).unwrap().text, "end");
        assert_eq!(backend.served(), vec![1, 2]);
        assert_eq!(backend.complete(&req("x")).unwrap_err(), LlmError::MatcherMiss { remaining: 1 });
        assert_eq!(backend.complete(&req("NOTES")).unwrap().text, "short");
        assert_eq!(backend.complete(&req("NOTES")).unwrap_err(), LlmError::ScriptExhausted { served: 3 });
    }

    #[test]
    fn repeating_entry_never_exhausts() {
        let backend = ScriptedBackend::new(Script {
            entries: vec![ScriptEntry::always(ScriptedResponse::text("<bash>true</bash>")).repeating()],
        });
        for _ in 0..10 {
            assert_eq!(backend.complete(&req("x")).unwrap().text, "<bash>true</bash>");
        }
    }

    #[test]
    fn identical_sequences_identical_responses() {
        let script = Script {
            entries: vec![
                ScriptEntry::always(ScriptedResponse::text("a")),
                ScriptEntry::when(Matcher::Contains("b".into()), ScriptedResponse::text("b")),
            ],
        };
        let run = |s: &Script| {
            let b = ScriptedBackend::new(s.clone());
            ["x", "b"].iter().map(|t| b.complete(&req(t)).map(|r| r.text)).collect::<Vec<_>>()
        };
        assert_eq!(run(&script), run(&script));
    }

    #[test]
    fn script_json_format() {
        let s = Script::from_json(
            r#"{"entries":[{"when":{"contains":"<result>"},"response":{"text":"hi"}},{"repeat":true,"response":{"native_calls":[{"name":"bash","arguments":{"command":"ls"}}]}}]}"#,
        )
        .unwrap();
        assert_eq!(s.entries.len(), 2);
        assert!(s.entries[1].repeat);
        assert_eq!(s.entries[1].response.native_calls[0].name, "bash");
    }
}
