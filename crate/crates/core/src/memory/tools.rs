use std::collections::BTreeSet;

use serde_json::json;

use super::{MemoryError, NodeKind, Scope};
use crate::codec::{Action, ToolOutcome, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, RunContext};
use crate::trajectory::EventKind;

/// Exposes the working-memory store as `memory_*` tools.
#[derive(Debug, Default)]
pub struct MemoryExtension;

fn parse_tags(raw: Option<&str>) -> BTreeSet<String> {
    raw.unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn show_tags(tags: &BTreeSet<String>) -> String {
    if tags.is_empty() {
        "none".into()
    } else {
        tags.iter().cloned().collect::<Vec<_>>().join(", ")
    }
}

fn required<'a>(action: &'a Action, key: &str) -> Result<&'a str, String> {
    action.attr(key).filter(|v| !v.trim().is_empty()).ok_or_else(|| format!("Missing required parameter `{key}` for {}.", action.name))
}

impl Extension for MemoryExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("memory")
            .tool(
                ToolSchema::new("memory_write", "Create or overwrite a memory document. Missing groups in the path are created.", "content")
                    .param("path", "Slash-separated node path, e.g. task/analysis.md", true)
                    .param("tags", "Comma-separated tags", false)
                    .param("scope", "session (default), entry or runnable", false),
            )
            .tool(ToolSchema::new("memory_read", "Read a memory document.", "path"))
            .tool(
                ToolSchema::new("memory_edit", "Replace the first exact occurrence of `find` in a memory document.", "replace")
                    .param("path", "Node path", true)
                    .param("find", "Exact text to replace", true),
            )
            .tool(
                ToolSchema::new("memory_delete", "Delete a memory node.", "path")
                    .param("recursive", "true to delete a group with its children", false),
            )
            .tool(
                ToolSchema::new("memory_search", "Case-insensitive search over memory bodies and tags.", "query")
                    .param("tag", "Only return documents with this exact tag", false),
            )
            .tool(
                ToolSchema::new("memory_tree", "Show the memory hierarchy.", "path")
                    .param("depth", "Maximum depth (default 5)", false),
            )
    }

    fn on_action(&mut self, ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        let result = match action.name.as_str() {
            "memory_write" => write(ctx, action),
            "memory_read" => read(ctx, action),
            "memory_edit" => edit(ctx, action),
            "memory_delete" => delete(ctx, action),
            "memory_search" => search(ctx, action),
            "memory_tree" => tree(ctx, action),
            _ => return Ok(ActionResult::NotHandled),
        };
        Ok(ActionResult::Observed(result.unwrap_or_else(|msg| ToolOutcome::error(msg.clone(), msg))))
    }
}

fn log_op(ctx: &mut RunContext, op: &str, path: &str, extra: serde_json::Value) {
    let mut payload = json!({ "op": op, "path": path });
    if let (Some(obj), serde_json::Value::Object(more)) = (payload.as_object_mut(), extra) {
        obj.extend(more);
    }
    ctx.recorder.record(EventKind::MemoryOp, payload);
}

fn err_text(e: MemoryError) -> String {
    format!("Memory error: {e}")
}

fn write(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let path = required(action, "path")?;
    let scope: Scope = action.attr("scope").unwrap_or("session").parse()?;
    let tags = parse_tags(action.attr("tags"));
    let existed = ctx.memory.read(path).is_ok();
    let seq = ctx.recorder.next_seq();
    let node = ctx.memory.write(path, &action.body, tags, scope, seq).map_err(err_text)?;
    log_op(ctx, "write", &node.path, json!({ "chars": node.body.chars().count(), "tags": node.tags, "scope": scope }));
    let verb = if existed { "Updated" } else { "Created" };
    let summary = format!("{verb} memory node '{}' with {} characters and tags: {}", node.path, node.body.chars().count(), show_tags(&node.tags));
    Ok(ToolOutcome::success(summary.clone(), format!("Writing to memory node '{}'...\n{summary}", node.path)))
}

fn read(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let path = action.attr("path").unwrap_or(action.body.trim());
    let node = ctx.memory.read(path).map_err(err_text)?;
    log_op(ctx, "read", &node.path, json!({}));
    let agent = match node.kind {
        NodeKind::Leaf => format!("[{}] tags: {}\n{}", node.path, show_tags(&node.tags), node.body),
        NodeKind::Internal => ctx.memory.list_tree(&node.path, 1).map_err(err_text)?,
    };
    Ok(ToolOutcome::success(agent, format!("Reading memory node '{}'", node.path)))
}

fn edit(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let path = required(action, "path")?;
    let find = action.attr("find").ok_or_else(|| "Missing required parameter `find` for memory_edit.".to_string())?;
    let seq = ctx.recorder.next_seq();
    let node = ctx.memory.edit(path, find, &action.body, seq).map_err(err_text)?;
    log_op(ctx, "edit", &node.path, json!({ "chars": node.body.chars().count() }));
    let text = format!("Edited memory node '{}'", node.path);
    Ok(ToolOutcome::success(text.clone(), text))
}

fn delete(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let path = action.attr("path").unwrap_or(action.body.trim());
    let recursive = action.attr("recursive").is_some_and(|v| v.eq_ignore_ascii_case("true"));
    let count = ctx.memory.delete(path, recursive).map_err(err_text)?;
    log_op(ctx, "delete", path, json!({ "removed": count }));
    let text = format!("Deleted {count} memory node(s) at '{path}'");
    Ok(ToolOutcome::success(text.clone(), text))
}

fn search(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let query = action.attr("query").unwrap_or(action.body.trim());
    let hits = ctx.memory.search(query, action.attr("tag")).map_err(err_text)?;
    log_op(ctx, "search", "", json!({ "query": query, "hits": hits.len() }));
    let agent = if hits.is_empty() {
        format!("No memory nodes match '{query}'.")
    } else {
        hits.iter().map(|h| format!("{}: {}", h.path, h.snippet)).collect::<Vec<_>>().join("\n")
    };
    Ok(ToolOutcome::success(agent, format!("Searched memory for '{query}': {} result(s)", hits.len())))
}

fn tree(ctx: &mut RunContext, action: &Action) -> Result<ToolOutcome, String> {
    let prefix = action.attr("path").unwrap_or(action.body.trim());
    let depth = match action.attr("depth") {
        Some(d) => d.trim().parse::<usize>().map_err(|_| format!("Invalid depth `{d}`."))?,
        None => 5,
    };
    let outline = ctx.memory.list_tree(prefix, depth).map_err(err_text)?;
    Ok(ToolOutcome::success(outline.clone(), format!("Memory tree:\n{outline}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::OutcomeStatus;
    use crate::extension::tests::test_ctx;

    fn run(ctx: &mut RunContext, action: Action) -> ToolOutcome {
        match MemoryExtension.on_action(ctx, &action).unwrap() {
            ActionResult::Observed(o) => o,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_read_and_tree() {
        let (_d, mut ctx) = test_ctx();
        let out = run(&mut ctx, Action::new("memory_write").with_attr("path", "todo.md").with_attr("tags", "plan, todo").with_body("- fix bug"));
        assert_eq!(out.user_text, "Writing to memory node 'todo.md'...\nCreated memory node 'todo.md' with 9 characters and tags: plan, todo");
        let out = run(&mut ctx, Action::new("memory_read").with_body("todo.md"));
        assert!(out.agent_text.ends_with("- fix bug"));
        let out = run(&mut ctx, Action::new("memory_tree"));
        assert_eq!(out.agent_text, ".\n+-- todo.md\n");
        assert_eq!(ctx.recorder.trajectory().of_kind(EventKind::MemoryOp).count(), 2);
        let node = ctx.memory.read("todo.md").unwrap();
        assert_eq!(node.updated_seq, 0);
    }

    #[test]
    fn errors_are_observations() {
        let (_d, mut ctx) = test_ctx();
        let out = run(&mut ctx, Action::new("memory_read").with_body("missing"));
        assert_eq!(out.status, OutcomeStatus::Error);
        let out = run(&mut ctx, Action::new("memory_write").with_attr("path", "../x").with_body("b"));
        assert_eq!(out.status, OutcomeStatus::Error);
        let out = run(&mut ctx, Action::new("memory_write").with_attr("path", "a").with_attr("scope", "galaxy").with_body("b"));
        assert!(out.agent_text.contains("unknown scope"));
    }
}
