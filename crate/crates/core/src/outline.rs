//! Tree outlines in the `|--` / `+--` style used for memory, notes and
//! directory views:
//!
//! ```text
//! .
//! +-- group
//!     |-- a.md
//!     +-- b.md
//! ```

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OutlineNode {
    pub name: String,
    pub children: Vec<OutlineNode>,
}

impl OutlineNode {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self { name: name.into(), children: Vec::new() }
    }

    pub fn branch(name: impl Into<String>, children: Vec<OutlineNode>) -> Self {
        Self { name: name.into(), children }
    }
}

/// Render `root` and its descendants; children appear in the given order.
pub fn render(root: &OutlineNode) -> String {
    let mut out = format!("{}\n", root.name);
    render_children(&root.children, "", &mut out);
    out
}

fn render_children(children: &[OutlineNode], prefix: &str, out: &mut String) {
    for (i, child) in children.iter().enumerate() {
        let last = i + 1 == children.len();
        out.push_str(prefix);
        out.push_str(if last { "+-- " } else { "|-- " });
        out.push_str(&child.name);
        out.push('\n');
        let next = format!("{prefix}{}", if last { "    " } else { "|   " });
        render_children(&child.children, &next, out);
    }
}
