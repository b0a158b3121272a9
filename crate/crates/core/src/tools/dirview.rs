//! `view_directory` and `view_file`.

use std::fs;
use std::path::Path;

use super::jail_path;
use crate::codec::{Action, ToolOutcome, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, RunContext};
use crate::outline::{self, OutlineNode};

#[derive(Debug, Default)]
pub struct ViewExtension;

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Sorted outline of `dir`, `depth` levels deep. Directories get a
/// trailing `/`.
pub fn directory_outline(dir: &Path, label: &str, depth: usize, show_hidden: bool) -> std::io::Result<String> {
    fn children(dir: &Path, depth: usize, show_hidden: bool) -> std::io::Result<Vec<OutlineNode>> {
        if depth == 0 {
            return Ok(Vec::new());
        }
        let mut entries: Vec<(String, bool)> = fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.file_type().map(|t| t.is_dir()).unwrap_or(false)))
            .filter(|(name, _)| show_hidden || !name.starts_with('.'))
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|(name, is_dir)| {
                if is_dir {
                    let sub = children(&dir.join(&name), depth - 1, show_hidden).unwrap_or_default();
                    Ok(OutlineNode::branch(format!("{name}/"), sub))
                } else {
                    Ok(OutlineNode::leaf(name))
                }
            })
            .collect()
    }
    Ok(outline::render(&OutlineNode::branch(label, children(dir, depth, show_hidden)?)))
}

fn parse_flag(v: Option<&str>) -> bool {
    v.is_some_and(|v| matches!(v.trim().to_ascii_lowercase().as_str(), "true" | "1" | "yes"))
}

impl Extension for ViewExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("view")
            .tool(
                ToolSchema::new("view_directory", "Show a directory tree. The body is the path.", "path")
                    .param("depth", "Levels to show (default 2)", false)
                    .param("show_hidden", "Include dotfiles (default false)", false),
            )
            .tool(
                ToolSchema::new("view_file", "Show a file with `<line_number>|` prefixes. The body is the path.", "path")
                    .param("start_line", "First line to show (1-based)", false)
                    .param("end_line", "Last line to show", false),
            )
    }

    fn on_action(&mut self, ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        let outcome = match action.name.as_str() {
            "view_directory" => view_directory(ctx, action),
            "view_file" => view_file(ctx, action),
            _ => return Ok(ActionResult::NotHandled),
        };
        Ok(ActionResult::Observed(outcome))
    }
}

fn target(action: &Action) -> &str {
    let p = action.attr("path").unwrap_or(action.body.trim());
    if p.is_empty() {
        "."
    } else {
        p
    }
}

fn view_directory(ctx: &mut RunContext, action: &Action) -> ToolOutcome {
    let requested = target(action);
    let depth = match action.attr("depth").map(|d| d.trim().parse::<usize>()) {
        None => 2,
        Some(Ok(d)) => d,
        Some(Err(_)) => {
            let msg = "depth must be a non-negative integer".to_string();
            return ToolOutcome::error(msg.clone(), msg);
        }
    };
    let show_hidden = parse_flag(action.attr("show_hidden"));
    let path = match jail_path(&ctx.workdir, requested) {
        Ok(p) => p,
        Err(e) => return ToolOutcome::rejected(e.clone(), e),
    };
    let shown = ctx.display_path(&path);
    let viewing = format!("Viewing directory at `{shown}`");
    if !path.is_dir() {
        let msg = format!("Directory `{shown}` does not exist.");
        return ToolOutcome::error(msg.clone(), format!("{viewing}\n{msg}"));
    }
    match directory_outline(&path, &shown, depth, show_hidden) {
        Ok(tree) => ToolOutcome::success(
            tree,
            format!("{viewing}\nDirectory content viewed at `{shown}`, depth: {depth}, show_hidden: {}", py_bool(show_hidden)),
        ),
        Err(e) => {
            let msg = format!("Cannot read `{shown}`: {e}");
            ToolOutcome::error(msg.clone(), format!("{viewing}\n{msg}"))
        }
    }
}

fn view_file(ctx: &mut RunContext, action: &Action) -> ToolOutcome {
    let requested = target(action);
    let path = match jail_path(&ctx.workdir, requested) {
        Ok(p) => p,
        Err(e) => return ToolOutcome::rejected(e.clone(), e),
    };
    let shown = ctx.display_path(&path);
    let viewing = format!("Viewing file at `{shown}`");
    let parse = |k: &str| action.attr(k).and_then(|v| v.trim().parse::<usize>().ok());
    let (start, end) = (parse("start_line"), parse("end_line"));
    let content = match fs::read_to_string(&path) {
        Ok(c) => c,
        Err(e) => {
            let msg = format!("Cannot read `{shown}`: {e}");
            return ToolOutcome::error(msg.clone(), format!("{viewing}\n{msg}"));
        }
    };
    let first = start.unwrap_or(1).max(1);
    let last = end.unwrap_or(usize::MAX);
    let numbered: String = content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(n, _)| *n >= first && *n <= last)
        .map(|(n, l)| format!("{n}|{l}\n"))
        .collect();
    let show = |v: Option<usize>| v.map_or("None".to_string(), |n| n.to_string());
    ToolOutcome::success(numbered, format!("{viewing}\nFile content viewed at `{shown}`, lines: {} - {}", show(start), show(end)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::OutcomeStatus;
    use crate::extension::tests::test_ctx;

    fn run(ctx: &mut RunContext, action: Action) -> ToolOutcome {
        let ActionResult::Observed(o) = ViewExtension.on_action(ctx, &action).unwrap() else { panic!() };
        o
    }

    fn fixture(root: &Path) {
        fs::create_dir_all(root.join("a/b/c")).unwrap();
        fs::write(root.join("a/b/c/deep.txt"), "").unwrap();
        fs::write(root.join("a/b/grand.txt"), "").unwrap();
        fs::write(root.join("a/child.txt"), "").unwrap();
        fs::write(root.join(".hidden"), "").unwrap();
        fs::write(root.join("top.txt"), "one\ntwo\nthree\n").unwrap();
    }

    #[test]
    fn depth_two_shows_grandchildren_only() {
        let (_d, mut ctx) = test_ctx();
        fixture(&ctx.workdir.clone());
        let out = run(&mut ctx, Action::new("view_directory").with_body("."));
        assert_eq!(out.user_text, "Viewing directory at `.`\nDirectory content viewed at `.`, depth: 2, show_hidden: False");
        assert!(out.agent_text.contains("b/"));
        assert!(out.agent_text.contains("child.txt"));
        assert!(!out.agent_text.contains("grand.txt"));
        assert!(!out.agent_text.contains(".hidden"));
        let out = run(&mut ctx, Action::new("view_directory").with_body("a").with_attr("show_hidden", "true").with_attr("depth", "2"));
        assert!(out.agent_text.contains("grand.txt"));
        assert!(!out.agent_text.contains("deep.txt"));
        let out = run(&mut ctx, Action::new("view_directory").with_attr("show_hidden", "True"));
        assert!(out.agent_text.contains(".hidden"));
        assert!(out.agent_text.contains(".memory/"));
    }

    #[test]
    fn escapes_and_missing() {
        let (_d, mut ctx) = test_ctx();
        assert_eq!(run(&mut ctx, Action::new("view_directory").with_body("../..")).status, OutcomeStatus::Rejected);
        assert_eq!(run(&mut ctx, Action::new("view_directory").with_body("nope")).status, OutcomeStatus::Error);
        assert_eq!(run(&mut ctx, Action::new("view_file").with_body("../x")).status, OutcomeStatus::Rejected);
    }

    #[test]
    fn file_view_is_numbered() {
        let (_d, mut ctx) = test_ctx();
        fixture(&ctx.workdir.clone());
        let out = run(&mut ctx, Action::new("view_file").with_body("top.txt"));
        assert_eq!(out.agent_text, "1|one\n2|two\n3|three\n");
        assert_eq!(out.user_text, "Viewing file at `top.txt`\nFile content viewed at `top.txt`, lines: None - None");
        let out = run(&mut ctx, Action::new("view_file").with_body("top.txt").with_attr("start_line", "2").with_attr("end_line", "2"));
        assert_eq!(out.agent_text, "2|two\n");
    }
}
