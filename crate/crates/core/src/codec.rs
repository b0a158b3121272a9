//! Parse model output into [`Action`]s and render tool results back into
//! agent-channel messages.
//!
//! Two encodings converge on the same `Action`:
//!
//! * XML-style tags embedded in text. Grammar:
//!   `tag := <name attrs?>body</name> | <name attrs?/>`,
//!   `attrs := key="value" (whitespace key="value")*`. Inside attribute values
//!   `\"` and `\\` are the only escapes. Only registered tool names are
//!   recognized; any other `<...>` is prose. The body runs to the first
//!   matching close tag and is kept byte-for-byte, including nested tags.
//! * Native tool calls: a name plus a JSON argument object. The tool's
//!   designated body parameter becomes the body, every other argument an
//!   attribute.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm::NativeCall;
use crate::message::{Channel, ContentBlock, Message, Role};
use crate::tokens::truncate_head_tail;

/// Agent-channel tool output beyond this many estimated tokens is cut to
/// head and tail.
pub const RESULT_TOKEN_LIMIT: u64 = 4000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unclosed tag <{name}> at offset {offset}")]
    UnclosedTag { name: String, offset: usize },
    #[error("malformed tag <{name}> at offset {offset}: {reason}")]
    MalformedTag { name: String, offset: usize, reason: String },
    #[error("unknown tool `{name}`")]
    UnknownTool { name: String },
    #[error("body of <{name}> contains its own closing tag and cannot be encoded as XML")]
    Unencodable { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Xml,
    Native,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub attributes: BTreeMap<String, String>,
    pub body: String,
    pub origin: Origin,
    /// Byte range in the raw response; `None` for native calls.
    pub span: Option<Range<usize>>,
}

impl Action {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), attributes: BTreeMap::new(), body: String::new(), origin: Origin::Xml, span: None }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn with_body(mut self, body: impl Into<String>) -> Self {
        self.body = body.into();
        self
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    /// Equality of the instruction itself, ignoring where it came from.
    pub fn same_instruction(&self, other: &Action) -> bool {
        self.name == other.name && self.attributes == other.attributes && self.body == other.body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub required: bool,
}

/// Declared shape of one tool, shared by both encodings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
    /// Native argument that maps onto the action body.
    pub body_param: String,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str, body_param: &str) -> Self {
        Self { name: name.into(), description: description.into(), params: Vec::new(), body_param: body_param.into() }
    }

    pub fn param(mut self, name: &str, description: &str, required: bool) -> Self {
        self.params.push(ParamSpec { name: name.into(), description: description.into(), required });
        self
    }

    /// JSON schema of the native argument object.
    pub fn input_schema(&self) -> Value {
        let mut props = Map::new();
        let mut required = Vec::new();
        for p in &self.params {
            props.insert(p.name.clone(), serde_json::json!({ "type": "string", "description": p.description }));
            if p.required {
                required.push(Value::String(p.name.clone()));
            }
        }
        props.entry(self.body_param.clone()).or_insert_with(|| serde_json::json!({ "type": "string" }));
        serde_json::json!({ "type": "object", "properties": props, "required": required })
    }
}

/// Set of tool names the parser recognizes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSchema>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, schema: ToolSchema) {
        self.tools.insert(schema.name.clone(), schema);
    }

    pub fn get(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn schemas(&self) -> impl Iterator<Item = &ToolSchema> {
        self.tools.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }
}

impl FromIterator<ToolSchema> for ToolRegistry {
    fn from_iter<I: IntoIterator<Item = ToolSchema>>(iter: I) -> Self {
        let mut reg = ToolRegistry::new();
        for s in iter {
            reg.insert(s);
        }
        reg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedOutput {
    pub actions: Vec<Action>,
    /// Prose outside recognized tags, concatenated in order.
    pub commentary: String,
}

/// Parse every recognized top-level tag in `text`, in document order.
pub fn parse_xml_actions(text: &str, registry: &ToolRegistry) -> Result<ParsedOutput, CodecError> {
    let mut out = ParsedOutput::default();
    let mut pos = 0;
    let mut prose_start = 0;
    while let Some(rel) = text[pos..].find('<') {
        let start = pos + rel;
        match parse_tag_at(text, start, registry)? {
            Some(action) => {
                out.commentary.push_str(&text[prose_start..start]);
                let end = action.span.as_ref().map(|s| s.end).unwrap_or(start + 1);
                out.actions.push(action);
                pos = end;
                prose_start = end;
            }
            None => pos = start + 1,
        }
    }
    out.commentary.push_str(&text[prose_start..]);
    Ok(out)
}

/// Try to read a recognized tag starting at byte `start` (which holds `<`).
fn parse_tag_at(text: &str, start: usize, registry: &ToolRegistry) -> Result<Option<Action>, CodecError> {
    let bytes = text.as_bytes();
    let mut i = start + 1;
    while i < bytes.len() && is_name_byte(bytes[i], i == start + 1) {
        i += 1;
    }
    let name = &text[start + 1..i];
    if name.is_empty() || !registry.contains(name) {
        return Ok(None);
    }
    match bytes.get(i) {
        None => return Err(CodecError::UnclosedTag { name: name.into(), offset: start }),
        Some(b) if b.is_ascii_whitespace() || *b == b'>' || *b == b'/' => {}
        Some(_) => return Ok(None),
    }

    let malformed = |reason: &str| CodecError::MalformedTag { name: name.into(), offset: start, reason: reason.into() };
    let unclosed = || CodecError::UnclosedTag { name: name.into(), offset: start };
    let mut attributes = BTreeMap::new();
    let self_closing;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        match bytes.get(i) {
            None => return Err(unclosed()),
            Some(b'>') => {
                i += 1;
                self_closing = false;
                break;
            }
            Some(b'/') => {
                if bytes.get(i + 1) == Some(&b'>') {
                    i += 2;
                    self_closing = true;
                    break;
                }
                return Err(malformed("stray '/' in tag"));
            }
            Some(_) => {}
        }
        let key_start = i;
        while i < bytes.len() && is_name_byte(bytes[i], i == key_start) {
            i += 1;
        }
        if i == key_start {
            return Err(malformed("expected attribute name"));
        }
        let key = text[key_start..i].to_string();
        if bytes.get(i) != Some(&b'=') {
            return Err(if i >= bytes.len() { unclosed() } else { malformed("expected '=' after attribute name") });
        }
        i += 1;
        if bytes.get(i) != Some(&b'"') {
            return Err(if i >= bytes.len() { unclosed() } else { malformed("attribute value must be double-quoted") });
        }
        i += 1;
        let (value, next) = read_quoted(text, i).ok_or_else(unclosed)?;
        i = next;
        if attributes.insert(key, value).is_some() {
            return Err(malformed("duplicate attribute"));
        }
    }

    let (body, end) = if self_closing {
        (String::new(), i)
    } else {
        let close = format!("</{name}>");
        let rel = text[i..].find(&close).ok_or_else(unclosed)?;
        (text[i..i + rel].to_string(), i + rel + close.len())
    };
    Ok(Some(Action { name: name.to_string(), attributes, body, origin: Origin::Xml, span: Some(start..end) }))
}

fn is_name_byte(b: u8, first: bool) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || (!first && (b.is_ascii_digit() || b == b'-'))
}

/// Read an attribute value after its opening quote; returns the unescaped
/// value and the index after the closing quote.
fn read_quoted(text: &str, from: usize) -> Option<(String, usize)> {
    let mut value = String::new();
    let mut chars = text[from..].char_indices();
    while let Some((off, c)) = chars.next() {
        match c {
            '"' => return Some((value, from + off + 1)),
            '\\' => match chars.next() {
                Some((_, '"')) => value.push('"'),
                Some((_, '\\')) => value.push('\\'),
                Some((_, other)) => {
                    value.push('\\');
                    value.push(other);
                }
                None => return None,
            },
            c => value.push(c),
        }
    }
    None
}

fn escape_attr(value: &str) -> String {
    value.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Encode `action` in the XML tag grammar.
pub fn encode_xml(action: &Action) -> Result<String, CodecError> {
    let close = format!("</{}>", action.name);
    if action.body.contains(&close) {
        return Err(CodecError::Unencodable { name: action.name.clone() });
    }
    let mut out = format!("<{}", action.name);
    for (k, v) in &action.attributes {
        out.push_str(&format!(" {k}=\"{}\"", escape_attr(v)));
    }
    out.push('>');
    out.push_str(&action.body);
    out.push_str(&close);
    Ok(out)
}

/// Encode `action` as a native tool call.
pub fn encode_native(action: &Action, registry: &ToolRegistry) -> Result<NativeCall, CodecError> {
    let schema = registry.get(&action.name).ok_or_else(|| CodecError::UnknownTool { name: action.name.clone() })?;
    let mut arguments = Map::new();
    for (k, v) in &action.attributes {
        arguments.insert(k.clone(), Value::String(v.clone()));
    }
    if !action.body.is_empty() {
        arguments.insert(schema.body_param.clone(), Value::String(action.body.clone()));
    }
    Ok(NativeCall { name: action.name.clone(), arguments })
}

/// Map native tool calls onto actions, in order.
pub fn from_native_calls(calls: &[NativeCall], registry: &ToolRegistry) -> Result<Vec<Action>, CodecError> {
    calls
        .iter()
        .map(|call| {
            let schema = registry.get(&call.name).ok_or_else(|| CodecError::UnknownTool { name: call.name.clone() })?;
            let mut action = Action::new(&call.name);
            action.origin = Origin::Native;
            for (k, v) in &call.arguments {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                if *k == schema.body_param {
                    action.body = text;
                } else {
                    action.attributes.insert(k.clone(), text);
                }
            }
            Ok(action)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Success,
    Error,
    Rejected,
}

/// Structured result of one tool invocation, split by audience.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolOutcome {
    pub status: OutcomeStatus,
    /// Compact text for the model.
    pub agent_text: String,
    /// Verbose text for the human (diffs, full output).
    pub user_text: String,
    /// Replace the action body in the assistant message with `...` once the
    /// payload has been persisted elsewhere.
    #[serde(default)]
    pub elide_action_body: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_file: Option<String>,
}

impl ToolOutcome {
    pub fn success(agent_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self::with_status(OutcomeStatus::Success, agent_text, user_text)
    }

    pub fn error(agent_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self::with_status(OutcomeStatus::Error, agent_text, user_text)
    }

    pub fn rejected(agent_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self::with_status(OutcomeStatus::Rejected, agent_text, user_text)
    }

    fn with_status(status: OutcomeStatus, agent_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self { status, agent_text: agent_text.into(), user_text: user_text.into(), elide_action_body: false, edited_file: None }
    }
}

/// Agent-channel text for an outcome: truncated to the result limit.
pub fn agent_result_text(agent_text: &str) -> (String, bool) {
    truncate_head_tail(agent_text, RESULT_TOKEN_LIMIT)
}

/// Wrap an outcome summary in result markup as a tool-result message.
pub fn render_result(seq: u64, outcome: &ToolOutcome) -> Message {
    let (text, _) = agent_result_text(&outcome.agent_text);
    Message::new(seq, Role::ToolResult, Channel::Agent, vec![ContentBlock::ResultMarkup(format!("<result>{text}</result>"))])
}

/// The action markup with its body replaced by `...`.
///
/// `raw` is the markup as the model wrote it (attribute order and spacing
/// survive); without it the action is re-encoded.
pub fn elided_markup(action: &Action, raw: Option<&str>) -> String {
    let close = format!("</{}>", action.name);
    if let Some(raw) = raw {
        let tail = action.body.len() + close.len();
        if raw.ends_with(&close) && raw.len() >= tail && raw[raw.len() - tail..].starts_with(action.body.as_str()) {
            return format!("{}...{close}", &raw[..raw.len() - tail]);
        }
    }
    let mut a = action.clone();
    a.body = "...".into();
    encode_xml(&a).unwrap_or_else(|_| format!("<{}>...{close}", action.name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry() -> ToolRegistry {
        [
            ToolSchema::new("bash", "run a command", "command"),
            ToolSchema::new("file_edit", "edit a file", "content")
                .param("type", "create|replace|insert_after", true)
                .param("file_path", "target", true),
            ToolSchema::new("complete", "finish", "output"),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn parses_bash_tag() {
        let out = parse_xml_actions("<bash>ls</bash>", &registry()).unwrap();
        assert_eq!(out.actions.len(), 1);
        let a = &out.actions[0];
        assert_eq!(a.name, "bash");
        assert_eq!(a.body, "ls");
        assert_eq!(a.origin, Origin::Xml);
        assert_eq!(a.span, Some(0..15));
        assert_eq!(out.commentary, "");
    }

    #[test]
    fn parses_file_edit_attributes() {
        let text = r#"<file_edit type="create" file_path="config.py">PORT=8080</file_edit>"#;
        let a = &parse_xml_actions(text, &registry()).unwrap().actions[0];
        assert_eq!(a.attr("type"), Some("create"));
        assert_eq!(a.attr("file_path"), Some("config.py"));
        assert_eq!(a.body, "PORT=8080");
    }

    #[test]
    fn no_tags_no_actions() {
        let out = parse_xml_actions("no tags here", &registry()).unwrap();
        assert!(out.actions.is_empty());
        assert_eq!(out.commentary, "no tags here");
    }

    #[test]
    fn unclosed_tag_is_error() {
        let err = parse_xml_actions("<bash>ls", &registry()).unwrap_err();
        assert_eq!(err, CodecError::UnclosedTag { name: "bash".into(), offset: 0 });
    }

    #[test]
    fn unknown_tags_stay_prose() {
        let text = "see <div>x</div> and <bashful> then <bash>pwd</bash> done";
        let out = parse_xml_actions(text, &registry()).unwrap();
        assert_eq!(out.actions.len(), 1);
        assert_eq!(out.commentary, "see <div>x</div> and <bashful> then  done");
    }

    #[test]
    fn nested_tags_kept_verbatim_and_newlines_preserved() {
        let text = "<file_edit type=\"replace\" file_path=\"a.py\">\n<find>\n1|x\n</find>\n<body>\ny\n</body>\n</file_edit>";
        let a = &parse_xml_actions(text, &registry()).unwrap().actions[0];
        assert_eq!(a.body, "\n<find>\n1|x\n</find>\n<body>\ny\n</body>\n");
    }

    #[test]
    fn escaped_attribute_quotes() {
        let text = r#"<file_edit type="create" file_path="a \"b\" \\c">x</file_edit>"#;
        let a = &parse_xml_actions(text, &registry()).unwrap().actions[0];
        assert_eq!(a.attr("file_path"), Some(r#"a "b" \c"#));
    }

    #[test]
    fn multiple_actions_in_document_order() {
        let text = "first <bash>a</bash> mid <complete>done</complete> end";
        let out = parse_xml_actions(text, &registry()).unwrap();
        let names: Vec<_> = out.actions.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["bash", "complete"]);
        assert!(out.actions[0].span.as_ref().unwrap().end <= out.actions[1].span.as_ref().unwrap().start);
    }

    #[test]
    fn self_closing_tag() {
        let out = parse_xml_actions("<complete/>", &registry()).unwrap();
        assert_eq!(out.actions[0].body, "");
    }

    #[test]
    fn malformed_attribute() {
        let err = parse_xml_actions("<bash x=1>ls</bash>", &registry()).unwrap_err();
        assert!(matches!(err, CodecError::MalformedTag { .. }));
    }

    #[test]
    fn native_bash_matches_xml_bash() {
        let mut args = Map::new();
        args.insert("command".into(), Value::String("ls".into()));
        let native = from_native_calls(&[NativeCall { name: "bash".into(), arguments: args }], &registry()).unwrap();
        let xml = parse_xml_actions("<bash>ls</bash>", &registry()).unwrap();
        assert_eq!(native[0].origin, Origin::Native);
        assert!(native[0].same_instruction(&xml.actions[0]));
    }

    #[test]
    fn native_empty_and_unknown() {
        assert!(from_native_calls(&[], &registry()).unwrap().is_empty());
        let err = from_native_calls(&[NativeCall { name: "unregistered_tool".into(), arguments: Map::new() }], &registry())
            .unwrap_err();
        assert_eq!(err, CodecError::UnknownTool { name: "unregistered_tool".into() });
    }

    #[test]
    fn file_create_result_is_exact() {
        let msg = render_result(4, &ToolOutcome::success("File created successfully", "Creating file at config.py"));
        assert_eq!(msg.rendered(), "<result>File created successfully</result>");
        assert_eq!(msg.channel, Channel::Agent);
        assert_eq!(msg.role, Role::ToolResult);
    }

    #[test]
    fn long_results_are_truncated() {
        let long = "x".repeat(50_000);
        let msg = render_result(0, &ToolOutcome::success(long.clone(), long));
        assert!(msg.token_estimate() <= RESULT_TOKEN_LIMIT + 10);
        assert!(msg.rendered().contains("elided"));
    }

    #[test]
    fn elision_keeps_raw_attribute_order() {
        let raw = "<file_edit type=\"create\" file_path=\"config.py\">\nPORT=8080\n</file_edit>";
        let a = &parse_xml_actions(raw, &registry()).unwrap().actions[0];
        assert_eq!(elided_markup(a, Some(raw)), r#"<file_edit type="create" file_path="config.py">...</file_edit>"#);
        assert_eq!(elided_markup(a, None), r#"<file_edit file_path="config.py" type="create">...</file_edit>"#);
    }

    proptest! {
        #[test]
        fn parsing_never_panics(text in "(?s).{0,200}") {
            let _ = parse_xml_actions(&text, &registry());
        }

        #[test]
        fn parsing_tag_soup_never_panics(parts in prop::collection::vec(
            prop_oneof![
                Just("<bash".to_string()), Just("</bash>".to_string()), Just(">".to_string()),
                Just("\"".to_string()), Just("\\".to_string()), Just("=".to_string()),
                Just(" x".to_string()), Just("<file_edit ".to_string()), Just("/>".to_string()),
                "[a-zé ]{0,4}",
            ], 0..20)) {
            let text: String = parts.concat();
            let _ = parse_xml_actions(&text, &registry());
        }
    }
}
