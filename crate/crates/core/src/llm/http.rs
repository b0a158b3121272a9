//! Anthropic Messages API adapter. Provider field names stay in this file.

use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{wire_role, Backend, LlmError, LlmRequest, LlmResponse, NativeCall, Usage, WireExchange};
use crate::tokens::estimate_tokens;

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "ANTHROPIC_API_KEY";
const ENDPOINT: &str = "https://api.anthropic.com/v1/messages";
const API_VERSION: &str = "2023-06-01";
const MIN_THINKING_BUDGET: u32 = 1024;

const SECRET_KEYS: &[&str] = &["x-api-key", "api_key", "authorization", "anthropic-api-key"];

pub struct HttpBackend {
    model_ref: String,
    model: String,
    api_key: String,
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("model_ref", &self.model_ref).field("endpoint", &self.endpoint).finish()
    }
}

impl HttpBackend {
    pub fn new(model: &str, api_key: String) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| LlmError::Load(e.to_string()))?;
        Ok(Self {
            model_ref: format!("anthropic:{model}"),
            model: model.to_string(),
            api_key,
            endpoint: ENDPOINT.to_string(),
            client,
        })
    }

    pub fn from_env(model: &str) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::Load(format!("{API_KEY_ENV} is not set")))?;
        Self::new(model, key)
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }
}

/// Build the provider request body.
pub fn to_wire(model: &str, request: &LlmRequest) -> Result<Value, LlmError> {
    let budget = request.thinking_budget;
    if budget > 0 && (budget < MIN_THINKING_BUDGET || budget >= request.max_output_tokens) {
        return Err(LlmError::BudgetRejected {
            budget,
            reason: format!("must be at least {MIN_THINKING_BUDGET} and below max_output_tokens ({})", request.max_output_tokens),
        });
    }
    // the provider requires alternating roles, so adjacent same-side turns merge
    let mut messages: Vec<(String, String)> = Vec::new();
    for m in &request.messages {
        let role = wire_role(m.role);
        let text = m.rendered();
        match messages.last_mut() {
            Some((r, t)) if r == role => {
                t.push_str("\n\n");
                t.push_str(&text);
            }
            _ => messages.push((role.to_string(), text)),
        }
    }
    if messages.first().is_some_and(|(r, _)| r == "assistant") {
        messages.insert(0, ("user".into(), "(continue)".into()));
    }
    let mut body = json!({
        "model": model,
        "max_tokens": request.max_output_tokens,
        "system": request.system_prompt,
        "messages": messages.iter().map(|(r, t)| json!({ "role": r, "content": t })).collect::<Vec<_>>(),
    });
    if let Some(tools) = &request.tool_schemas {
        body["tools"] = tools
            .iter()
            .map(|t| json!({ "name": t.name, "description": t.description, "input_schema": t.input_schema() }))
            .collect();
    }
    if budget > 0 {
        body["thinking"] = json!({ "type": "enabled", "budget_tokens": budget });
    }
    Ok(body)
}

/// Parse the provider response body.
pub fn from_wire(body: &Value) -> Result<LlmResponse, LlmError> {
    let blocks = body
        .get("content")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Protocol("response has no content array".into()))?;
    let mut text = String::new();
    let mut native_calls = Vec::new();
    let mut thinking = 0;
    for block in blocks {
        match block.get("type").and_then(Value::as_str) {
            Some("text") => text.push_str(block.get("text").and_then(Value::as_str).unwrap_or_default()),
            Some("tool_use") => native_calls.push(NativeCall {
                name: block.get("name").and_then(Value::as_str).unwrap_or_default().to_string(),
                arguments: block.get("input").and_then(Value::as_object).cloned().unwrap_or_default(),
            }),
            Some("thinking") => thinking += estimate_tokens(block.get("thinking").and_then(Value::as_str).unwrap_or_default()),
            _ => {}
        }
    }
    let usage = body.get("usage").cloned().unwrap_or(Value::Null);
    let count = |k: &str| usage.get(k).and_then(Value::as_u64).unwrap_or(0);
    Ok(LlmResponse {
        text,
        native_calls,
        usage: Usage { input_tokens: count("input_tokens"), output_tokens: count("output_tokens"), thinking_tokens: thinking },
        wire: None,
    })
}

/// Copy of `value` with credential-looking fields replaced.
pub fn redact(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut out = Map::new();
            for (k, v) in map {
                if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
                    out.insert(k.clone(), Value::String("[redacted]".into()));
                } else {
                    out.insert(k.clone(), redact(v));
                }
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(redact).collect()),
        other => other.clone(),
    }
}

impl Backend for HttpBackend {
    fn model_ref(&self) -> &str {
        &self.model_ref
    }

    fn supports_thinking_budget(&self) -> bool {
        true
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let body = to_wire(&self.model, request)?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header("x-api-key", &self.api_key)
            .header("anthropic-version", API_VERSION)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        let payload: Value = resp.json().map_err(|e| LlmError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LlmError::Transport(format!("HTTP {status}: {}", redact(&payload))));
        }
        if !status.is_success() {
            return Err(LlmError::Protocol(format!("HTTP {status}: {}", redact(&payload))));
        }
        let mut out = from_wire(&payload)?;
        out.wire = Some(WireExchange { request: redact(&body), response: redact(&payload) });
        Ok(out)
    }
}
