//! Extension registry and dispatcher.
//!
//! An extension declares the actions (tools) it owns and which hooks it
//! implements. Hooks run in `(order, registration sequence)` order:
//!
//! | hook                | when                                          |
//! |---------------------|-----------------------------------------------|
//! | `on_session_start`  | once, before the first model call             |
//! | `on_input_messages` | before every model call; may rewrite the list |
//! | `on_llm_output`     | on raw model text, before parsing             |
//! | `on_action`         | for each owned action, in document order      |
//! | `on_session_end`    | once, after the loop ends                     |
//!
//! Tool failures are observations, not errors. A hook that returns `Err` or
//! panics during `on_action` is converted into an error observation; after
//! [`MAX_CONSECUTIVE_CRASHES`] such conversions in a row for one extension
//! the session aborts.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::{render_result, Action, OutcomeStatus, ToolOutcome, ToolRegistry, ToolSchema};
use crate::config::AgentConfig;
use crate::memory::{MemoryStore, Scope};
use crate::message::Message;
use crate::trajectory::{EventKind, Recorder};

pub const MAX_CONSECUTIVE_CRASHES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Hooks {
    pub session_start: bool,
    pub input_messages: bool,
    pub llm_output: bool,
    pub action: bool,
    pub session_end: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionDescriptor {
    pub name: String,
    pub tools: Vec<ToolSchema>,
    pub hooks: Hooks,
    pub order: i32,
}

impl ExtensionDescriptor {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), tools: Vec::new(), hooks: Hooks::default(), order: 0 }
    }

    pub fn tool(mut self, schema: ToolSchema) -> Self {
        self.tools.push(schema);
        self.hooks.action = true;
        self
    }

    pub fn hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = Hooks { action: self.hooks.action || hooks.action, ..hooks };
        self
    }

    pub fn order(mut self, order: i32) -> Self {
        self.order = order;
        self
    }

    pub fn handled_actions(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.name.as_str())
    }
}

/// What an extension did with an action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionResult {
    Observed(ToolOutcome),
    Completed(String),
    NotHandled,
}

/// What the orchestrator does next after routing one action.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    ContinueWith(Vec<Message>),
    Completed(String),
    NoAction,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct HookError(pub String);

impl HookError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl From<std::io::Error> for HookError {
    fn from(e: std::io::Error) -> Self {
        Self(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegisterError {
    #[error("extension `{0}` is already registered")]
    DuplicateName(String),
    #[error("action `{action}` is owned by `{owner}`, cannot also register it for `{claimant}`")]
    ActionOwnershipConflict { action: String, owner: String, claimant: String },
    #[error("extension `{0}` declares tools but no on_action hook")]
    MissingActionHook(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HostError {
    #[error("hook {hook} of extension `{extension}` failed: {message}")]
    HookFailed { extension: String, hook: &'static str, message: String },
    #[error("extension `{extension}` failed {count} times in a row; aborting")]
    TooManyCrashes { extension: String, count: u32 },
}

/// Named artifacts produced during a session, readable from other threads.
#[derive(Debug, Clone, Default)]
pub struct Artifacts(Arc<RwLock<BTreeMap<String, String>>>);

impl Artifacts {
    pub fn put(&self, name: impl Into<String>, value: impl Into<String>) {
        self.0.write().expect("artifacts lock").insert(name.into(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<String> {
        self.0.read().expect("artifacts lock").get(name).cloned()
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.0.read().expect("artifacts lock").clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub edited_files: BTreeSet<String>,
}

/// Shared state handed to every hook.
pub struct RunContext {
    pub session_id: String,
    pub workdir: PathBuf,
    pub memory: MemoryStore,
    pub artifacts: Artifacts,
    pub config: Arc<AgentConfig>,
    pub recorder: Recorder,
    pub stats: SessionStats,
    extension_state: BTreeMap<String, Value>,
    current_extension: Option<String>,
}

impl RunContext {
    pub fn new(session_id: impl Into<String>, workdir: PathBuf, memory: MemoryStore, config: Arc<AgentConfig>, recorder: Recorder) -> Self {
        Self {
            session_id: session_id.into(),
            workdir,
            memory,
            artifacts: Artifacts::default(),
            config,
            recorder,
            stats: SessionStats::default(),
            extension_state: BTreeMap::new(),
            current_extension: None,
        }
    }

    /// Private state of the extension whose hook is running.
    pub fn state(&mut self) -> &mut Value {
        let name = self.current_extension.clone().expect("state() called outside a hook");
        self.extension_state.entry(name).or_insert(Value::Null)
    }

    pub fn current_extension(&self) -> Option<&str> {
        self.current_extension.as_deref()
    }

    /// Render a path under the workdir relative to it, for display.
    pub fn display_path(&self, path: &std::path::Path) -> String {
        let shown = path.strip_prefix(&self.workdir).unwrap_or(path);
        let s = shown.to_string_lossy().into_owned();
        if s.is_empty() {
            ".".into()
        } else {
            s
        }
    }
}

pub trait Extension: Send {
    fn descriptor(&self) -> ExtensionDescriptor;

    fn on_session_start(&mut self, _ctx: &mut RunContext) -> Result<(), HookError> {
        Ok(())
    }

    fn on_input_messages(&mut self, _ctx: &mut RunContext, messages: Vec<Message>) -> Result<Vec<Message>, HookError> {
        Ok(messages)
    }

    fn on_llm_output(&mut self, _ctx: &mut RunContext, text: String) -> Result<String, HookError> {
        Ok(text)
    }

    fn on_action(&mut self, _ctx: &mut RunContext, _action: &Action) -> Result<ActionResult, HookError> {
        Ok(ActionResult::NotHandled)
    }

    fn on_session_end(&mut self, _ctx: &mut RunContext) -> Result<(), HookError> {
        Ok(())
    }
}

struct Registered {
    ext: Box<dyn Extension>,
    desc: ExtensionDescriptor,
    registration: usize,
    crashes: u32,
}

/// Extra facts about an action, recorded with its execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteMeta {
    /// Position of the action in its model response.
    pub index: usize,
    /// Markup to show in place of the action once its body is elided.
    pub elided_markup: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub step: StepOutcome,
    pub outcome: Option<ToolOutcome>,
}

#[derive(Default)]
pub struct ExtensionHost {
    entries: Vec<Registered>,
    owners: BTreeMap<String, usize>,
    registrations: usize,
}

impl ExtensionHost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, ext: Box<dyn Extension>) -> Result<(), RegisterError> {
        let desc = ext.descriptor();
        if self.entries.iter().any(|e| e.desc.name == desc.name) {
            return Err(RegisterError::DuplicateName(desc.name));
        }
        if !desc.tools.is_empty() && !desc.hooks.action {
            return Err(RegisterError::MissingActionHook(desc.name));
        }
        for action in desc.handled_actions() {
            if let Some(&owner) = self.owners.get(action) {
                return Err(RegisterError::ActionOwnershipConflict {
                    action: action.into(),
                    owner: self.entries[owner].desc.name.clone(),
                    claimant: desc.name.clone(),
                });
            }
        }
        let reg = Registered { ext, desc, registration: self.registrations, crashes: 0 };
        self.registrations += 1;
        let pos = self
            .entries
            .iter()
            .position(|e| (e.desc.order, e.registration) > (reg.desc.order, reg.registration))
            .unwrap_or(self.entries.len());
        self.entries.insert(pos, reg);
        self.owners.clear();
        for (i, e) in self.entries.iter().enumerate() {
            for action in e.desc.handled_actions() {
                self.owners.insert(action.to_string(), i);
            }
        }
        Ok(())
    }

    /// Extension names in dispatch order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.desc.name.as_str()).collect()
    }

    pub fn registry(&self) -> ToolRegistry {
        self.entries.iter().flat_map(|e| e.desc.tools.iter().cloned()).collect()
    }

    pub fn owner_of(&self, action: &str) -> Option<&str> {
        self.owners.get(action).map(|&i| self.entries[i].desc.name.as_str())
    }

    fn with_current<T>(ctx: &mut RunContext, name: &str, f: impl FnOnce(&mut RunContext) -> T) -> T {
        ctx.current_extension = Some(name.to_string());
        let out = f(ctx);
        ctx.current_extension = None;
        out
    }

    pub fn run_session_start(&mut self, ctx: &mut RunContext) -> Result<(), HostError> {
        for e in self.entries.iter_mut().filter(|e| e.desc.hooks.session_start) {
            Self::with_current(ctx, &e.desc.name, |ctx| e.ext.on_session_start(ctx)).map_err(|err| HostError::HookFailed {
                extension: e.desc.name.clone(),
                hook: "on_session_start",
                message: err.0,
            })?;
        }
        Ok(())
    }

    pub fn run_session_end(&mut self, ctx: &mut RunContext) -> Result<(), HostError> {
        let mut first = None;
        for e in self.entries.iter_mut().filter(|e| e.desc.hooks.session_end) {
            if let Err(err) = Self::with_current(ctx, &e.desc.name, |ctx| e.ext.on_session_end(ctx)) {
                first.get_or_insert(HostError::HookFailed { extension: e.desc.name.clone(), hook: "on_session_end", message: err.0 });
            }
        }
        first.map_or(Ok(()), Err)
    }

    /// Apply every `on_input_messages` hook in order.
    pub fn run_input_hooks(&mut self, ctx: &mut RunContext, mut messages: Vec<Message>) -> Result<Vec<Message>, HostError> {
        for e in self.entries.iter_mut().filter(|e| e.desc.hooks.input_messages) {
            messages = Self::with_current(ctx, &e.desc.name, |ctx| e.ext.on_input_messages(ctx, messages)).map_err(|err| {
                HostError::HookFailed { extension: e.desc.name.clone(), hook: "on_input_messages", message: err.0 }
            })?;
        }
        Ok(messages)
    }

    /// Apply every `on_llm_output` hook in order.
    pub fn run_output_hooks(&mut self, ctx: &mut RunContext, mut text: String) -> Result<String, HostError> {
        for e in self.entries.iter_mut().filter(|e| e.desc.hooks.llm_output) {
            text = Self::with_current(ctx, &e.desc.name, |ctx| e.ext.on_llm_output(ctx, text)).map_err(|err| HostError::HookFailed {
                extension: e.desc.name.clone(),
                hook: "on_llm_output",
                message: err.0,
            })?;
        }
        Ok(text)
    }

    /// Dispatch one action to its owner, logging `action_parsed` and
    /// `action_executed`.
    pub fn route_action(&mut self, ctx: &mut RunContext, action: &Action, meta: &RouteMeta) -> Result<Routed, HostError> {
        ctx.recorder.record(
            EventKind::ActionParsed,
            json!({ "index": meta.index, "action": action }),
        );
        let Some(&idx) = self.owners.get(&action.name) else {
            let mut known: Vec<String> = self.owners.keys().cloned().collect();
            known.sort();
            let text = format!(
                "Tool `{}` does not exist. Available tools: {}.",
                action.name,
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            );
            let outcome = ToolOutcome::error(text.clone(), text);
            return Ok(self.observed(ctx, action, meta, None, outcome));
        };
        let entry = &mut self.entries[idx];
        let name = entry.desc.name.clone();
        let result = Self::with_current(ctx, &name, |ctx| {
            let r = catch_unwind(AssertUnwindSafe(|| entry.ext.on_action(ctx, action)));
            ctx.memory.clear_scope(Scope::Runnable);
            r
        });
        let failure = match result {
            Ok(Ok(r)) => {
                entry.crashes = 0;
                match r {
                    ActionResult::Observed(outcome) => return Ok(self.observed(ctx, action, meta, Some(&name), outcome)),
                    ActionResult::Completed(output) => {
                        ctx.recorder.record(
                            EventKind::ActionExecuted,
                            json!({ "index": meta.index, "action": action.name, "extension": name, "status": "completed", "final_output": output }),
                        );
                        return Ok(Routed { step: StepOutcome::Completed(output), outcome: None });
                    }
                    ActionResult::NotHandled => {
                        ctx.recorder.record(
                            EventKind::ActionExecuted,
                            json!({ "index": meta.index, "action": action.name, "extension": name, "status": "not_handled" }),
                        );
                        return Ok(Routed { step: StepOutcome::NoAction, outcome: None });
                    }
                }
            }
            Ok(Err(err)) => err.0,
            Err(panic) => panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into()),
        };
        let entry = &mut self.entries[idx];
        entry.crashes += 1;
        if entry.crashes > MAX_CONSECUTIVE_CRASHES {
            return Err(HostError::TooManyCrashes { extension: name, count: entry.crashes });
        }
        let text = format!("Tool `{}` failed internally: {failure}", action.name);
        Ok(self.observed(ctx, action, meta, Some(&name), ToolOutcome::error(text.clone(), text)))
    }

    fn observed(&self, ctx: &mut RunContext, action: &Action, meta: &RouteMeta, ext: Option<&str>, outcome: ToolOutcome) -> Routed {
        let status = match outcome.status {
            OutcomeStatus::Success => "success",
            OutcomeStatus::Error => "error",
            OutcomeStatus::Rejected => "rejected",
        };
        if let Some(file) = &outcome.edited_file {
            ctx.stats.edited_files.insert(file.clone());
        }
        let elided = if outcome.elide_action_body { meta.elided_markup.clone() } else { None };
        let seq = ctx.recorder.record(
            EventKind::ActionExecuted,
            json!({
                "index": meta.index,
                "action": action.name,
                "extension": ext,
                "status": status,
                "agent_text": outcome.agent_text,
                "user_text": outcome.user_text,
                "edited_file": outcome.edited_file,
                "elided_markup": elided,
            }),
        );
        Routed { step: StepOutcome::ContinueWith(vec![render_result(seq, &outcome)]), outcome: Some(outcome) }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::message::Role;
    use crate::trajectory::{FixedClock, Trajectory};

    pub(crate) fn test_ctx() -> (tempfile::TempDir, RunContext) {
        let dir = tempfile::tempdir().unwrap();
        let memory = MemoryStore::open(dir.path().join(".memory")).unwrap();
        let rec = Recorder::new(Trajectory::new("s", "c"), Arc::new(FixedClock::default()));
        let ctx = RunContext::new("s", dir.path().to_path_buf(), memory, Arc::new(AgentConfig::new("t", "scripted")), rec);
        (dir, ctx)
    }

    struct Tool {
        name: &'static str,
        tools: Vec<&'static str>,
        order: i32,
        tag: Option<&'static str>,
        behaviour: fn(&Action) -> Result<ActionResult, HookError>,
    }

    impl Tool {
        fn new(name: &'static str, tools: Vec<&'static str>) -> Self {
            Self { name, tools, order: 0, tag: None, behaviour: |a| Ok(ActionResult::Observed(ToolOutcome::success(format!("ran {}", a.body), ""))) }
        }
    }

    impl Extension for Tool {
        fn descriptor(&self) -> ExtensionDescriptor {
            let mut d = ExtensionDescriptor::new(self.name).order(self.order);
            for t in &self.tools {
                d = d.tool(ToolSchema::new(t, "", "body"));
            }
            if self.tag.is_some() {
                d = d.hooks(Hooks { input_messages: true, ..Hooks::default() });
            }
            d
        }

        fn on_input_messages(&mut self, _ctx: &mut RunContext, mut messages: Vec<Message>) -> Result<Vec<Message>, HookError> {
            messages.push(Message::text(0, Role::User, self.tag.unwrap()));
            Ok(messages)
        }

        fn on_action(&mut self, ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
            let n = ctx.state().as_u64().unwrap_or(0);
            *ctx.state() = Value::from(n + 1);
            (self.behaviour)(action)
        }
    }

    #[test]
    fn registration_order_and_priority() {
        let mut host = ExtensionHost::new();
        host.register(Box::new(Tool::new("bash", vec!["bash"]))).unwrap();
        host.register(Box::new(Tool::new("file_edit", vec!["file_edit"]))).unwrap();
        let mut early = Tool::new("early", vec![]);
        early.order = -1;
        host.register(Box::new(early)).unwrap();
        assert_eq!(host.names(), vec!["early", "bash", "file_edit"]);
        assert_eq!(host.owner_of("file_edit"), Some("file_edit"));
    }

    #[test]
    fn registration_errors() {
        let mut host = ExtensionHost::new();
        host.register(Box::new(Tool::new("a", vec!["bash"]))).unwrap();
        assert_eq!(host.register(Box::new(Tool::new("a", vec![]))), Err(RegisterError::DuplicateName("a".into())));
        assert!(matches!(
            host.register(Box::new(Tool::new("b", vec!["bash"]))),
            Err(RegisterError::ActionOwnershipConflict { .. })
        ));
    }

    struct NoHook;
    impl Extension for NoHook {
        fn descriptor(&self) -> ExtensionDescriptor {
            let mut d = ExtensionDescriptor::new("nohook");
            d.tools.push(ToolSchema::new("x", "", "body"));
            d
        }
    }

    #[test]
    fn tools_require_action_hook() {
        assert_eq!(ExtensionHost::new().register(Box::new(NoHook)), Err(RegisterError::MissingActionHook("nohook".into())));
    }

    #[test]
    fn unknown_action_becomes_observation() {
        let (_d, mut ctx) = test_ctx();
        let mut host = ExtensionHost::new();
        let routed = host.route_action(&mut ctx, &Action::new("frobnicate"), &RouteMeta::default()).unwrap();
        let StepOutcome::ContinueWith(msgs) = routed.step else { panic!() };
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].rendered().contains("Tool `frobnicate` does not exist"));
        let t = ctx.recorder.trajectory();
        assert_eq!(t.of_kind(EventKind::ActionParsed).count(), 1);
        assert_eq!(t.of_kind(EventKind::ActionExecuted).count(), 1);
    }

    #[test]
    fn input_hooks_compose_in_order() {
        let (_d, mut ctx) = test_ctx();
        let mut host = ExtensionHost::new();
        for (name, tag) in [("one", "A"), ("two", "B"), ("three", "C")] {
            let mut t = Tool::new(name, vec![]);
            t.tag = Some(tag);
            host.register(Box::new(t)).unwrap();
        }
        let out = host.run_input_hooks(&mut ctx, vec![]).unwrap();
        let tags: Vec<String> = out.iter().map(Message::rendered).collect();
        assert_eq!(tags, vec!["A", "B", "C"]);
        assert_eq!(ExtensionHost::new().run_input_hooks(&mut ctx, out.clone()).unwrap(), out);
    }

    #[test]
    fn crashes_convert_then_abort() {
        let (_d, mut ctx) = test_ctx();
        let mut host = ExtensionHost::new();
        let mut t = Tool::new("boom", vec!["boom"]);
        t.behaviour = |_| panic!("kaboom");
        host.register(Box::new(t)).unwrap();
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        for _ in 0..MAX_CONSECUTIVE_CRASHES {
            let r = host.route_action(&mut ctx, &Action::new("boom"), &RouteMeta::default()).unwrap();
            let StepOutcome::ContinueWith(m) = r.step else { panic!() };
            assert!(m[0].rendered().contains("kaboom"));
        }
        let err = host.route_action(&mut ctx, &Action::new("boom"), &RouteMeta::default()).unwrap_err();
        std::panic::set_hook(prev);
        assert_eq!(err, HostError::TooManyCrashes { extension: "boom".into(), count: 4 });
    }

    #[test]
    fn completion_and_state_namespacing() {
        let (_d, mut ctx) = test_ctx();
        let mut host = ExtensionHost::new();
        let mut done = Tool::new("complete", vec!["complete"]);
        done.behaviour = |a| Ok(ActionResult::Completed(a.body.clone()));
        host.register(Box::new(done)).unwrap();
        host.register(Box::new(Tool::new("bash", vec!["bash"]))).unwrap();
        host.route_action(&mut ctx, &Action::new("bash"), &RouteMeta::default()).unwrap();
        host.route_action(&mut ctx, &Action::new("bash"), &RouteMeta::default()).unwrap();
        let r = host.route_action(&mut ctx, &Action::new("complete").with_body("ok"), &RouteMeta::default()).unwrap();
        assert_eq!(r.step, StepOutcome::Completed("ok".into()));
        assert_eq!(ctx.extension_state["bash"], Value::from(2));
        assert_eq!(ctx.extension_state["complete"], Value::from(1));
    }
}
