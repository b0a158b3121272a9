//! `file_edit`: create files, replace or insert after located chunks.
//!
//! XML form:
//!
//! ```text
//! <file_edit type="replace" file_path="app.py">
//! <find>
//! 12|    return x
//! </find>
//! <body>
//!     return x + 1
//! </body>
//! </file_edit>
//! ```
//!
//! For `create` the whole tag body is the file content unless a `<body>`
//! child is present. Native calls pass `find` / `find_after` as arguments
//! and the new text as `content`.

use std::fs;

use super::jail_path;
use super::matcher::{full_diff, match_chunk, FindMode, FindSpec, Match};
use crate::codec::{Action, Origin, ToolOutcome, ToolSchema};
use crate::extension::{ActionResult, Extension, ExtensionDescriptor, HookError, RunContext};
use crate::prompts::MATCH_FAILURE;

#[derive(Debug, Default)]
pub struct FileEditExtension;

/// Contents of the first `<tag>...</tag>` child, if any.
fn child<'a>(body: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = body.find(&open)? + open.len();
    let end = body.rfind(&close)?;
    (end >= start).then(|| &body[start..end])
}

fn strip_leading_newline(s: &str) -> &str {
    s.strip_prefix('\n').unwrap_or(s)
}

struct EditRequest<'a> {
    kind: &'a str,
    path: &'a str,
    find: Option<(FindMode, String)>,
    content: String,
}

fn parse_request(action: &Action) -> Result<EditRequest<'_>, String> {
    let kind = action.attr("type").ok_or("Missing required attribute `type` (create, replace or insert_after).")?;
    let path = action.attr("file_path").filter(|p| !p.trim().is_empty()).ok_or("Missing required attribute `file_path`.")?;
    let structured = action.origin == Origin::Xml && ["<find>", "<find_after>", "<body>"].iter().any(|t| action.body.contains(t));
    let find = if let Some(f) = action.attr("find") {
        Some((FindMode::Find, f.to_string()))
    } else if let Some(f) = action.attr("find_after") {
        Some((FindMode::FindAfter, f.to_string()))
    } else if structured {
        child(&action.body, "find")
            .map(|f| (FindMode::Find, f.to_string()))
            .or_else(|| child(&action.body, "find_after").map(|f| (FindMode::FindAfter, f.to_string())))
    } else {
        None
    };
    let content = if structured { child(&action.body, "body").unwrap_or("") } else { action.body.as_str() };
    Ok(EditRequest { kind, path, find, content: strip_leading_newline(content).to_string() })
}

/// Text after replacing or inserting at `m`.
fn splice(original: &str, m: &Match, mode: FindMode, new_text: &str) -> String {
    let pieces: Vec<&str> = original.split_inclusive('\n').collect();
    let end = m.start + m.len;
    let (cut_from, cut_to) = match mode {
        FindMode::Find => (m.start, end),
        FindMode::FindAfter => (end, end),
    };
    let after = pieces[cut_to..].concat();
    let had_newline = original.ends_with('\n');
    let mut out = pieces[..cut_from].concat();
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(new_text);
    if !new_text.is_empty() && !new_text.ends_with('\n') && (!after.is_empty() || had_newline) {
        out.push('\n');
    }
    if after.is_empty() && !had_newline && mode == FindMode::Find && !new_text.is_empty() && out.ends_with('\n') {
        out.pop();
    }
    out.push_str(&after);
    out
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}")).collect::<Vec<_>>().join("\n")
}

impl Extension for FileEditExtension {
    fn descriptor(&self) -> ExtensionDescriptor {
        ExtensionDescriptor::new("file_edit").tool(
            ToolSchema::new("file_edit", "Create a file, or replace / insert after a chunk located by `<line_number>|<exact_line_content>` lines.", "content")
                .param("type", "create, replace or insert_after", true)
                .param("file_path", "File path relative to the working directory", true)
                .param("find", "Lines to replace, one `<line_number>|<exact_line_content>` per line", false)
                .param("find_after", "Lines to insert after, same format", false),
        )
    }

    fn on_action(&mut self, ctx: &mut RunContext, action: &Action) -> Result<ActionResult, HookError> {
        Ok(ActionResult::Observed(apply_file_edit(ctx, action)))
    }
}

pub fn apply_file_edit(ctx: &mut RunContext, action: &Action) -> ToolOutcome {
    let req = match parse_request(action) {
        Ok(r) => r,
        Err(e) => return ToolOutcome::error(e.clone(), e),
    };
    let target = match jail_path(&ctx.workdir, req.path) {
        Ok(p) => p,
        Err(e) => return ToolOutcome::rejected(e.clone(), e),
    };
    let shown = ctx.display_path(&target);
    let mut outcome = match req.kind {
        "create" => {
            let old = fs::read_to_string(&target).unwrap_or_default();
            if let Some(parent) = target.parent() {
                if let Err(e) = fs::create_dir_all(parent) {
                    let msg = format!("Cannot create directory for {shown}: {e}");
                    return ToolOutcome::error(msg.clone(), msg);
                }
            }
            if let Err(e) = fs::write(&target, &req.content) {
                let msg = format!("Cannot write {shown}: {e}");
                return ToolOutcome::error(msg.clone(), msg);
            }
            let diff = full_diff(&old, &req.content);
            ToolOutcome::success(
                "File created successfully",
                format!("Creating file at {shown}\nFile created successfully at {shown}\nHere is the diff:\n{}", diff.trim_end()),
            )
        }
        "replace" | "insert_after" => {
            let expected_mode = if req.kind == "replace" { FindMode::Find } else { FindMode::FindAfter };
            let tag = if expected_mode == FindMode::Find { "find" } else { "find_after" };
            let Some((mode, spec_text)) = req.find.as_ref().filter(|(m, _)| *m == expected_mode) else {
                let msg = format!("`{}` edits need a <{tag}> block.", req.kind);
                return ToolOutcome::error(msg.clone(), msg);
            };
            let spec = match FindSpec::parse(*mode, spec_text) {
                Ok(s) => s,
                Err(e) => {
                    let msg = format!("Invalid <{tag}> block: {e}");
                    return ToolOutcome::error(msg.clone(), msg);
                }
            };
            let original = match fs::read_to_string(&target) {
                Ok(t) => t,
                Err(e) => {
                    let msg = format!("Cannot read {shown}: {e}");
                    return ToolOutcome::error(msg.clone(), msg);
                }
            };
            let m = match match_chunk(&original, &spec, ctx.config.template(MATCH_FAILURE)) {
                Ok(m) => m,
                Err(failure) => {
                    let verb = if *mode == FindMode::Find { "Replacing content in" } else { "Inserting content into" };
                    return ToolOutcome::error(failure.message.clone(), format!("{verb} file at {shown}\n{}", failure.message));
                }
            };
            let updated = splice(&original, &m, *mode, &req.content);
            if let Err(e) = fs::write(&target, &updated) {
                let msg = format!("Cannot write {shown}: {e}");
                return ToolOutcome::error(msg.clone(), msg);
            }
            let mut agent = if *mode == FindMode::Find { "Content replaced successfully".to_string() } else { "Content inserted successfully".to_string() };
            if let Some(stated) = m.shifted_from {
                agent.push_str(&format!(" (matched at line {}, not line {stated})", m.start + 1));
            }
            let header = if *mode == FindMode::Find { "Replacing content in file at" } else { "Inserting content into file at" };
            ToolOutcome::success(agent, format!("{header} {shown}\nDiff:\n{}", indent(&full_diff(&original, &updated))))
        }
        other => {
            let msg = format!("Unknown edit type `{other}`; use create, replace or insert_after.");
            return ToolOutcome::error(msg.clone(), msg);
        }
    };
    outcome.elide_action_body = true;
    outcome.edited_file = Some(shown);
    outcome
}
