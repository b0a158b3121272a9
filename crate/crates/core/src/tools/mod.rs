//! Coding tools: file editing, shell commands, directory and file views,
//! and the `complete` action.

pub mod command;
pub mod dirview;
pub mod edit;
pub mod matcher;

use std::path::{Component, Path, PathBuf};

use crate::codec::{Action, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, RunContext};

pub use command::{BashExtension, CommandPolicy, CommandPolicySpec, Verdict};
pub use dirview::ViewExtension;
pub use edit::FileEditExtension;

/// Resolve `path` against `root` without touching the file system and
/// refuse anything that leaves `root`.
pub fn jail_path(root: &Path, path: &str) -> Result<PathBuf, String> {
    let requested = Path::new(path.trim());
    let joined = if requested.is_absolute() { requested.to_path_buf() } else { root.join(requested) };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::ParentDir => {
                if !out.pop() {
                    return Err(format!("Path `{path}` is outside the working directory."));
                }
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    let root_norm: PathBuf = root.components().filter(|c| !matches!(c, Component::CurDir)).collect();
    if !out.starts_with(&root_norm) {
        return Err(format!("Path `{path}` is outside the working directory."));
    }
    if let (Ok(real_root), Some(real)) = (root.canonicalize(), existing_prefix(&out)) {
        if !real.starts_with(&real_root) {
            return Err(format!("Path `{path}` is outside the working directory."));
        }
    }
    Ok(out)
}

/// Canonical form of the longest existing ancestor of `path`.
fn existing_prefix(path: &Path) -> Option<PathBuf> {
    path.ancestors().find_map(|p| p.canonicalize().ok())
}

/// Ends the session with the action body as final output.
#[derive(Debug, Default)]
pub struct CompleteExtension;

impl Extension for CompleteExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("complete").tool(ToolSchema::new(
            "complete",
            "Finish the task. The body is your final report to the user.",
            "output",
        ))
    }

    fn on_action(&mut self, _ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        Ok(ActionResult::Completed(action.body.trim().to_string()))
    }
}
