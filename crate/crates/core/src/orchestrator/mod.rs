//! The session loop.
//!
//! Each iteration: project history, compress if over threshold, run input
//! hooks, call the model, run output hooks, parse, route every action in
//! order. The session ends when a reply holds no actions, an action
//! completes it, an unrecoverable error occurs, or `max_iters` is reached.
//!
//! The agent-channel history is never mutated directly; it is a projection
//! of the trajectory (see [`projector`]), which keeps live runs and replays
//! identical.

pub mod projector;
pub mod render;

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog;
use crate::codec::{elided_markup, from_native_calls, parse_xml_actions, Action, Origin, ToolRegistry, ToolSchema};
use crate::compress::{compress, should_compress};
use crate::config::AgentConfig;
use crate::extension::{Extension, ExtensionHost, RouteMeta, RunContext, StepOutcome};
use crate::llm::{complete_with_retries, resolve_backend, Backend, BackendMode, CallRole, LlmRequest, NativeCall};
use crate::memory::{MemoryStore, Scope};
use crate::message::Message;
use crate::prompts;
use crate::trajectory::{Clock, EventKind, JsonlSink, Recorder, SystemClock, Trajectory, FILE_EXTENSION};

pub use projector::{project_history, HistoryProjector};
pub use render::{replay, UserView, UserViewSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Completed,
    Aborted,
    IterCapped,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Completed => "completed",
            SessionStatus::Aborted => "aborted",
            SessionStatus::IterCapped => "iter_capped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "completed" => Some(SessionStatus::Completed),
            "aborted" => Some(SessionStatus::Aborted),
            "iter_capped" => Some(SessionStatus::IterCapped),
            _ => None,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(self) -> i32 {
        match self {
            SessionStatus::Completed => 0,
            SessionStatus::IterCapped => 2,
            SessionStatus::Aborted => 3,
        }
    }
}

/// Failures before the loop starts; nothing has run yet.
#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot set up session: {0}")]
    Setup(String),
}

pub struct SessionOptions {
    pub session_id: Option<String>,
    /// Shown in the first transcript line when the prompt came from a file.
    pub prompt_file: Option<String>,
    /// Directory receiving `<session>.traj.jsonl` and `<session>.log`.
    pub output_dir: Option<PathBuf>,
    /// Also stream the user view to stdout.
    pub echo: bool,
    pub clock: Arc<dyn Clock>,
    /// Backend for compression summaries; resolved from the config when
    /// absent.
    pub architect: Option<Arc<dyn Backend>>,
    /// Registered after the configured extensions.
    pub extra_extensions: Vec<Box<dyn Extension>>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            session_id: None,
            prompt_file: None,
            output_dir: None,
            echo: false,
            clock: Arc::new(SystemClock),
            architect: None,
            extra_extensions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub session_id: String,
    pub status: SessionStatus,
    pub iterations: u32,
    pub final_output: Option<String>,
    pub error: Option<String>,
    pub trajectory: Trajectory,
    pub artifacts: std::collections::BTreeMap<String, String>,
    pub edited_files: Vec<String>,
    /// Agent-channel history at the end of the session.
    pub history: Vec<Message>,
    pub user_view: String,
    pub token_cost: u64,
}

/// Tokens sent and received by the agent, excluding system prompts.
pub fn token_cost(trajectory: &Trajectory) -> u64 {
    let agent = |e: &&crate::trajectory::Event| e.str_field("role") == "agent";
    let sent: u64 = trajectory.of_kind(EventKind::LlmRequest).filter(agent).map(|e| e.u64_field("message_tokens")).sum();
    let received: u64 = trajectory
        .of_kind(EventKind::LlmResponse)
        .filter(agent)
        .filter_map(|e| e.payload.get("usage").and_then(|u| u.get("output_tokens")).and_then(Value::as_u64))
        .sum();
    sent + received
}

/// Default session id: agent name plus a hash of the prompt.
pub fn session_id_for(config: &AgentConfig, prompt: &str) -> String {
    let mut h = DefaultHasher::new();
    prompt.hash(&mut h);
    format!("{}-{:08x}", config.name, h.finish() as u32)
}

/// One line per tool, substituted for `{{tools}}` in the system prompt.
pub fn tools_doc(registry: &ToolRegistry) -> String {
    let mut out = String::new();
    for t in registry.schemas() {
        let attrs: String = t.params.iter().map(|p| format!(" {}=\"...\"", p.name)).collect();
        out.push_str(&format!("<{name}{attrs}>{body}</{name}>\n    {desc}\n", name = t.name, body = t.body_param, desc = t.description));
        for p in &t.params {
            out.push_str(&format!("    - {}{}: {}\n", p.name, if p.required { "" } else { " (optional)" }, p.description));
        }
    }
    out.trim_end().to_string()
}

fn open_log(dir: &Path, name: &str) -> Result<BufWriter<File>, SessionError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| SessionError::Setup(format!("{}: {e}", path.display())))
}

struct Tee<A: Write, B: Write>(A, Option<B>);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        if let Some(b) = &mut self.1 {
            b.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        if let Some(b) = &mut self.1 {
            b.flush()?;
        }
        Ok(())
    }
}

/// Actions parsed from one reply, plus the prose around them.
struct Parsed {
    actions: Vec<Action>,
    commentary: String,
}

fn native_actions(calls: &[NativeCall], registry: &ToolRegistry) -> Vec<Action> {
    calls
        .iter()
        .map(|call| match from_native_calls(std::slice::from_ref(call), registry) {
            Ok(mut v) => v.remove(0),
            Err(_) => {
                let mut a = Action::new(&call.name);
                a.origin = Origin::Native;
                for (k, v) in &call.arguments {
                    a.attributes.insert(k.clone(), v.as_str().map_or_else(|| v.to_string(), String::from));
                }
                a
            }
        })
        .collect()
}

fn parse_reply(mode: BackendMode, text: &str, calls: &[NativeCall], registry: &ToolRegistry) -> Result<Parsed, String> {
    match mode {
        BackendMode::Xml => {
            let out = parse_xml_actions(text, registry).map_err(|e| e.to_string())?;
            Ok(Parsed { actions: out.actions, commentary: out.commentary })
        }
        BackendMode::Native => Ok(Parsed { actions: native_actions(calls, registry), commentary: text.to_string() }),
    }
}

enum Stop {
    Completed(Option<String>),
    Aborted(String),
}

struct Loop<'a> {
    config: &'a AgentConfig,
    backend: &'a dyn Backend,
    architect: Arc<dyn Backend>,
    host: ExtensionHost,
    ctx: RunContext,
    projector: HistoryProjector,
    registry: ToolRegistry,
    system_prompt: String,
    iterations: u32,
}

impl Loop<'_> {
    fn step(&mut self) -> Option<Stop> {
        self.projector.catch_up(self.ctx.recorder.trajectory());
        let policy = &self.config.compression;
        if should_compress(self.projector.history(), policy) {
            let history = self.projector.history().to_vec();
            let template = self.config.template(prompts::ARCHITECT).to_string();
            if let Err(e) = compress(&history, policy, self.architect.as_ref(), &template, &mut self.ctx.recorder) {
                return Some(Stop::Aborted(format!("compression failed: {e}")));
            }
            self.projector.catch_up(self.ctx.recorder.trajectory());
        }
        let messages = match self.host.run_input_hooks(&mut self.ctx, self.projector.history().to_vec()) {
            Ok(m) => m,
            Err(e) => return Some(Stop::Aborted(e.to_string())),
        };
        let mut request = LlmRequest::new(self.system_prompt.clone(), messages);
        request.thinking_budget = self.config.thinking_budget;
        request.max_output_tokens = self.config.max_output_tokens;
        if self.config.backend_mode == BackendMode::Native {
            request.tool_schemas = Some(self.registry.schemas().cloned().collect());
        }
        let response = match complete_with_retries(self.backend, &request, &mut self.ctx.recorder, CallRole::Agent, self.config.llm_retries) {
            Ok(r) => r,
            Err(e) => return Some(Stop::Aborted(format!("model call failed: {e}"))),
        };
        let text = match self.host.run_output_hooks(&mut self.ctx, response.text.clone()) {
            Ok(t) => t,
            Err(e) => return Some(Stop::Aborted(e.to_string())),
        };
        if text != response.text {
            self.ctx.recorder.record(
                EventKind::Warning,
                json!({ "source": "orchestrator", "message": "output hooks rewrote the model reply", "rewritten_text": text }),
            );
        }
        let parsed = match parse_reply(self.config.backend_mode, &text, &response.native_calls, &self.registry) {
            Ok(p) => p,
            Err(err) => {
                self.ctx.recorder.record(
                    EventKind::ValidationReject,
                    json!({ "source": "parse", "error": err, "agent_text": projector::parse_error_text(&err) }),
                );
                return None;
            }
        };
        if parsed.actions.is_empty() {
            return Some(Stop::Completed(Some(parsed.commentary.trim().to_string())));
        }
        for (index, action) in parsed.actions.iter().enumerate() {
            let raw = action.span.clone().and_then(|s| text.get(s));
            let meta = RouteMeta { index, elided_markup: Some(elided_markup(action, raw)) };
            match self.host.route_action(&mut self.ctx, action, &meta) {
                Ok(routed) => {
                    if let StepOutcome::Completed(output) = routed.step {
                        return Some(Stop::Completed(Some(output)));
                    }
                }
                Err(e) => return Some(Stop::Aborted(e.to_string())),
            }
        }
        self.ctx.memory.clear_scope(Scope::Entry);
        None
    }
}

/// Run one session with an explicit agent backend.
pub fn run_session_with(
    config: &AgentConfig,
    task: &str,
    backend: Arc<dyn Backend>,
    mut options: SessionOptions,
) -> Result<SessionResult, SessionError> {
    config.validate().map_err(|e| SessionError::Config(e.to_string()))?;
    let session_id = options.session_id.clone().unwrap_or_else(|| session_id_for(config, task));
    let workdir = config.resolve(&config.workdir);
    std::fs::create_dir_all(&workdir).map_err(|e| SessionError::Setup(format!("{}: {e}", workdir.display())))?;
    let architect = match options.architect.take() {
        Some(a) => a,
        None => match &config.compression.architect_model_ref {
            Some(r) => resolve_backend(r, &config.base_dir, None).map_err(|e| SessionError::Setup(format!("architect backend: {e}")))?,
            None => backend.clone(),
        },
    };

    let mut host = ExtensionHost::new();
    for ext in catalog::build_extensions(config).into_iter().chain(options.extra_extensions.drain(..)) {
        host.register(ext).map_err(|e| SessionError::Setup(e.to_string()))?;
    }
    let registry = host.registry();

    let mut recorder = Recorder::new(Trajectory::new(&session_id, &config.name), options.clock.clone());
    if let Some(dir) = &options.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| SessionError::Setup(format!("{}: {e}", dir.display())))?;
        let traj = open_log(dir, &format!("{session_id}.{FILE_EXTENSION}"))?;
        let sink = JsonlSink::new(traj, recorder.trajectory()).map_err(|e| SessionError::Setup(e.to_string()))?;
        recorder.add_sink(Box::new(sink));
        let log = open_log(dir, &format!("{session_id}.log"))?;
        let stdout = options.echo.then(io::stdout);
        recorder.add_sink(Box::new(UserViewSink::new(Tee(log, stdout))));
    } else if options.echo {
        recorder.add_sink(Box::new(UserViewSink::new(io::stdout())));
    }

    let memory = MemoryStore::open(workdir.join(".memory")).map_err(|e| SessionError::Setup(format!("memory: {e}")))?;
    let mut ctx = RunContext::new(&session_id, workdir, memory, Arc::new(config.clone()), recorder);

    let tools: Vec<ToolSchema> = registry.schemas().cloned().collect();
    let mut start = json!({
        "agent": config.name,
        "model_ref": backend.model_ref(),
        "backend_mode": config.backend_mode,
        "max_iters": config.max_iters,
        "extensions": host.names(),
        "tools": tools,
    });
    if let Some(file) = &options.prompt_file {
        start["prompt_file"] = json!(file);
    }
    ctx.recorder.record(EventKind::SessionStart, start);

    let system_prompt = prompts::render(config.template(prompts::SYSTEM), &[("tools", &tools_doc(&registry))]);
    let mut state = Loop {
        config,
        backend: backend.as_ref(),
        architect,
        host,
        ctx,
        projector: HistoryProjector::new(),
        registry,
        system_prompt,
        iterations: 0,
    };

    let stop = match state.host.run_session_start(&mut state.ctx) {
        Err(e) => Some(Stop::Aborted(e.to_string())),
        Ok(()) => {
            state.ctx.recorder.record(EventKind::UserMessage, json!({ "text": task, "pinned": true }));
            let mut stop = None;
            while stop.is_none() && state.iterations < config.max_iters {
                state.iterations += 1;
                stop = state.step();
            }
            stop
        }
    };
    let (status, final_output, error) = match stop {
        Some(Stop::Completed(out)) => (SessionStatus::Completed, out, None),
        Some(Stop::Aborted(e)) => (SessionStatus::Aborted, None, Some(e)),
        None => (SessionStatus::IterCapped, None, None),
    };

    let Loop { mut host, mut ctx, mut projector, iterations, .. } = state;
    if let Err(e) = host.run_session_end(&mut ctx) {
        ctx.recorder.warn("orchestrator", e.to_string());
    }
    if let Some(e) = ctx.recorder.take_sink_error() {
        ctx.recorder.warn("orchestrator", format!("transcript output failed: {e}"));
    }
    let edited_files: Vec<String> = ctx.stats.edited_files.iter().cloned().collect();
    let mut end = json!({
        "status": status.as_str(),
        "iterations": iterations,
        "final_output": final_output,
        "edited_files": edited_files,
    });
    if let Some(e) = &error {
        end["error"] = json!(e);
    }
    ctx.recorder.record(EventKind::SessionEnd, end);
    ctx.recorder.take_sink_error();

    let trajectory = ctx.recorder.snapshot();
    projector.catch_up(&trajectory);
    Ok(SessionResult {
        session_id,
        status,
        iterations,
        final_output,
        error,
        user_view: replay(&trajectory),
        token_cost: token_cost(&trajectory),
        history: projector.history().to_vec(),
        artifacts: ctx.artifacts.snapshot(),
        edited_files,
        trajectory,
    })
}

/// Run one session with the backend named by the config's `model_ref`.
pub fn run_session(config: &AgentConfig, task: &str, options: SessionOptions) -> Result<SessionResult, SessionError> {
    let backend = resolve_backend(&config.model_ref, &config.base_dir, None).map_err(|e| SessionError::Setup(e.to_string()))?;
    run_session_with(config, task, backend, options)
}
