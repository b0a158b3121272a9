//! Shell commands behind an ordered deny-list.
//!
//! Rules are regular expressions checked in order; the first match rejects
//! the command and its `display` text is shown as
//! ``Command rejected (disallowed): `display` ``. Allowed commands run via
//! `sh -c` in the session working directory, in their own process group so
//! a timeout can kill the whole tree.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec::{agent_result_text, Action, ToolOutcome, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, RunContext};
use crate::trajectory::EventKind;

const DEFAULT_POLICY: &str = include_str!("../../config/command_policy.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub pattern: String,
    pub display: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandPolicySpec {
    pub timeout_secs: u64,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
}

impl Default for CommandPolicySpec {
    fn default() -> Self {
        toml::from_str(DEFAULT_POLICY).expect("shipped command policy parses")
    }
}

impl CommandPolicySpec {
    pub fn compile(&self) -> Result<CommandPolicy, String> {
        if self.timeout_secs == 0 {
            return Err("timeout_secs must be positive".into());
        }
        let rules = self
            .rules
            .iter()
            .map(|r| Regex::new(&r.pattern).map(|re| (re, r.clone())).map_err(|e| format!("rule `{}`: {e}", r.display)))
            .collect::<Result<_, _>>()?;
        Ok(CommandPolicy { rules, timeout: Duration::from_secs(self.timeout_secs) })
    }
}

#[derive(Debug, Clone)]
pub struct CommandPolicy {
    rules: Vec<(Regex, RuleSpec)>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allowed,
    Rejected { rule: usize, display: String, reason: String },
}

impl Verdict {
    pub fn rejection_line(&self) -> Option<String> {
        match self {
            Verdict::Allowed => None,
            Verdict::Rejected { display, .. } => Some(format!("Command rejected (disallowed): `{display}`")),
        }
    }
}

impl CommandPolicy {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn validate(&self, cmd: &str) -> Verdict {
        self.rules
            .iter()
            .enumerate()
            .find(|(_, (re, _))| re.is_match(cmd))
            .map(|(rule, (_, spec))| Verdict::Rejected { rule, display: spec.display.clone(), reason: spec.reason.clone() })
            .unwrap_or(Verdict::Allowed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutput {
    /// `None` when the process was killed by a signal or timed out.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

fn drain(mut r: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Run `cmd` with `sh -c` in `workdir`, killing its process group on timeout.
pub fn run_command(cmd: &str, workdir: &Path, timeout: Duration) -> std::io::Result<CommandOutput> {
    let mut command = Command::new("sh");
    command.arg("-c").arg(cmd).current_dir(workdir).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }
    let mut child = command.spawn()?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));
    let deadline = Instant::now() + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            timed_out = true;
            #[cfg(unix)]
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        thread::sleep(Duration::from_millis(10));
    };
    Ok(CommandOutput {
        exit_code: status.and_then(|s| s.code()),
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
        timed_out,
    })
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}")).collect::<Vec<_>>().join("\n")
}

/// The `bash` tool.
#[derive(Debug, Default)]
pub struct BashExtension {
    policy: Option<CommandPolicy>,
}

impl BashExtension {
    pub fn with_policy(policy: CommandPolicy) -> Self {
        Self { policy: Some(policy) }
    }

    fn policy(&mut self, ctx: &RunContext) -> Result<&CommandPolicy, String> {
        if self.policy.is_none() {
            let spec = ctx.config.command_policy.clone().unwrap_or_default();
            self.policy = Some(spec.compile()?);
        }
        Ok(self.policy.as_ref().expect("policy set"))
    }
}

impl Extension for BashExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("bash").tool(ToolSchema::new(
            "bash",
            "Run a shell command in the working directory. Do not use `cd`; pass directories to the command instead.",
            "command",
        ))
    }

    fn on_action(&mut self, ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        let cmd = action.body.trim().to_string();
        if cmd.is_empty() {
            let msg = "The command is empty.".to_string();
            return Ok(ActionResult::Observed(ToolOutcome::error(msg.clone(), msg)));
        }
        let policy = self.policy(ctx).map_err(HookError)?.clone();
        let validating = format!("Validating command `{cmd}`");
        let verdict = policy.validate(&cmd);
        if let Verdict::Rejected { rule, display, reason } = &verdict {
            let line = verdict.rejection_line().expect("rejected");
            ctx.recorder.record(
                EventKind::ValidationReject,
                json!({ "source": "command", "command": cmd, "rule": rule, "display": display, "reason": reason }),
            );
            let agent = if reason.is_empty() { line.clone() } else { format!("{line}\nReason: {reason}") };
            return Ok(ActionResult::Observed(ToolOutcome::rejected(agent, format!("{validating}\n{line}"))));
        }
        let shown_dir = ctx.display_path(&ctx.workdir.clone());
        let header = format!("{validating}\nRunning command in `{shown_dir}`:\n{}", indent(&cmd));
        let output = match run_command(&cmd, &ctx.workdir, policy.timeout) {
            Ok(o) => o,
            Err(e) => {
                let msg = format!("Failed to start command: {e}");
                return Ok(ActionResult::Observed(ToolOutcome::error(msg.clone(), format!("{header}\n{msg}"))));
            }
        };
        let mut combined = output.stdout.clone();
        if !output.stderr.is_empty() {
            if !combined.is_empty() && !combined.ends_with('\n') {
                combined.push('\n');
            }
            combined.push_str(&output.stderr);
        }
        let status_line = if output.timed_out {
            format!("Command timed out after {} seconds and was killed.", policy.timeout.as_secs_f64())
        } else {
            match output.exit_code {
                Some(c) => format!("Exit code: {c}"),
                None => "Command terminated by a signal.".to_string(),
            }
        };
        let (shown_output, _) = agent_result_text(&combined);
        let agent = if combined.is_empty() { format!("{status_line}\n(no output)") } else { format!("{status_line}\nOutput:\n{shown_output}") };
        let user = format!("{header}\nOutput:\n{}{}", indent(&combined), if output.timed_out { format!("\n{status_line}") } else { String::new() });
        let outcome = if output.timed_out || output.exit_code != Some(0) { ToolOutcome::error(agent, user) } else { ToolOutcome::success(agent, user) };
        Ok(ActionResult::Observed(outcome))
    }
}
