//! File-system-backed hierarchical working memory.
//!
//! Layout under the store root (normally `<workdir>/.memory`):
//!
//! ```text
//! group/                    internal node
//! group.meta.json           its metadata
//! group/analysis.md         leaf body, verbatim
//! group/analysis.md.meta.json
//! ```
//!
//! Metadata sidecars hold kind, tags, scope and `updated_seq`. Path segments
//! match `[A-Za-z0-9._-]+`; `.`, `..` and names ending in `.meta.json` are
//! rejected.
//!
//! Scopes: `session` nodes live for the whole session, `entry` nodes are
//! cleared at the end of each orchestrator iteration, `runnable` nodes after
//! each tool invocation.

mod tools;

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::outline::{self, OutlineNode};

pub use tools::MemoryExtension;

const META_SUFFIX: &str = ".meta.json";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("invalid memory path `{0}`")]
    InvalidPath(String),
    #[error("memory node `{0}` not found")]
    NotFound(String),
    #[error("`{0}` is a group node and cannot hold a document")]
    PathCollision(String),
    #[error("`{0}` is a document and cannot contain other nodes")]
    LeafParent(String),
    #[error("text to replace not found in `{0}`")]
    NoMatch(String),
    #[error("`{0}` has children; delete it recursively")]
    NotEmpty(String),
    #[error("memory io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt metadata for `{path}`: {reason}")]
    Corrupt { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Session,
    Entry,
    Runnable,
}

impl std::str::FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "session" => Ok(Scope::Session),
            "entry" => Ok(Scope::Entry),
            "runnable" => Ok(Scope::Runnable),
            other => Err(format!("unknown scope `{other}` (session, entry, runnable)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Internal,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    kind: NodeKind,
    tags: BTreeSet<String>,
    scope: Scope,
    updated_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryNode {
    pub path: String,
    pub kind: NodeKind,
    pub body: String,
    pub tags: BTreeSet<String>,
    pub scope: Scope,
    pub updated_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SearchHit {
    pub path: String,
    pub snippet: String,
    pub tag_hit: bool,
    pub match_count: usize,
}

/// Split and validate a slash-separated memory path.
pub fn parse_path(path: &str) -> Result<Vec<&str>, MemoryError> {
    let trimmed = path.trim_matches('/');
    if trimmed.is_empty() {
        return Err(MemoryError::InvalidPath(path.into()));
    }
    let segments: Vec<&str> = trimmed.split('/').collect();
    for seg in &segments {
        let ok = !seg.is_empty()
            && *seg != "."
            && *seg != ".."
            && !seg.ends_with(META_SUFFIX)
            && seg.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
        if !ok {
            return Err(MemoryError::InvalidPath(path.into()));
        }
    }
    Ok(segments)
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        0
    } else {
        haystack.matches(needle).count()
    }
}

/// One session's working memory.
#[derive(Debug)]
pub struct MemoryStore {
    root: PathBuf,
}

impl MemoryStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, MemoryError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn fs_path(&self, segments: &[&str]) -> PathBuf {
        segments.iter().fold(self.root.clone(), |p, s| p.join(s))
    }

    fn meta_path(&self, segments: &[&str]) -> PathBuf {
        let mut p = self.fs_path(segments);
        let name = format!("{}{META_SUFFIX}", segments.last().expect("non-empty path"));
        p.set_file_name(name);
        p
    }

    fn read_meta(&self, segments: &[&str]) -> Result<Option<Meta>, MemoryError> {
        match fs::read_to_string(self.meta_path(segments)) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| MemoryError::Corrupt { path: segments.join("/"), reason: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn write_meta(&self, segments: &[&str], meta: &Meta) -> Result<(), MemoryError> {
        fs::write(self.meta_path(segments), serde_json::to_string_pretty(meta).expect("meta serializes"))?;
        Ok(())
    }

    /// Create or overwrite the leaf at `path`, creating missing groups.
    pub fn write(&mut self, path: &str, body: &str, tags: BTreeSet<String>, scope: Scope, seq: u64) -> Result<MemoryNode, MemoryError> {
        let segments = parse_path(path)?;
        for depth in 1..segments.len() {
            let prefix = &segments[..depth];
            match self.read_meta(prefix)? {
                Some(m) if m.kind == NodeKind::Leaf => return Err(MemoryError::LeafParent(prefix.join("/"))),
                Some(_) => {}
                None => {
                    fs::create_dir_all(self.fs_path(prefix))?;
                    self.write_meta(prefix, &Meta { kind: NodeKind::Internal, tags: BTreeSet::new(), scope: Scope::Session, updated_seq: seq })?;
                }
            }
        }
        if let Some(m) = self.read_meta(&segments)? {
            if m.kind == NodeKind::Internal {
                return Err(MemoryError::PathCollision(segments.join("/")));
            }
        }
        fs::write(self.fs_path(&segments), body)?;
        let meta = Meta { kind: NodeKind::Leaf, tags, scope, updated_seq: seq };
        self.write_meta(&segments, &meta)?;
        Ok(MemoryNode { path: segments.join("/"), kind: NodeKind::Leaf, body: body.into(), tags: meta.tags, scope, updated_seq: seq })
    }

    pub fn read(&self, path: &str) -> Result<MemoryNode, MemoryError> {
        let segments = parse_path(path)?;
        let meta = self.read_meta(&segments)?.ok_or_else(|| MemoryError::NotFound(path.into()))?;
        let body = match meta.kind {
            NodeKind::Leaf => fs::read_to_string(self.fs_path(&segments))?,
            NodeKind::Internal => String::new(),
        };
        Ok(MemoryNode { path: segments.join("/"), kind: meta.kind, body, tags: meta.tags, scope: meta.scope, updated_seq: meta.updated_seq })
    }

    /// Replace the first exact occurrence of `find` in a leaf.
    pub fn edit(&mut self, path: &str, find: &str, replace: &str, seq: u64) -> Result<MemoryNode, MemoryError> {
        let node = self.read(path)?;
        if node.kind != NodeKind::Leaf {
            return Err(MemoryError::PathCollision(node.path));
        }
        if find.is_empty() || !node.body.contains(find) {
            return Err(MemoryError::NoMatch(node.path));
        }
        let body = node.body.replacen(find, replace, 1);
        self.write(&node.path, &body, node.tags, node.scope, seq)
    }

    /// Remove a node; groups with children need `recursive`. Returns the
    /// number of nodes removed.
    pub fn delete(&mut self, path: &str, recursive: bool) -> Result<usize, MemoryError> {
        let segments = parse_path(path)?;
        let meta = self.read_meta(&segments)?.ok_or_else(|| MemoryError::NotFound(path.into()))?;
        let fs_path = self.fs_path(&segments);
        let count = match meta.kind {
            NodeKind::Leaf => {
                fs::remove_file(&fs_path)?;
                1
            }
            NodeKind::Internal => {
                let descendants = self.descendants(&segments.join("/"))?.len();
                if descendants > 0 && !recursive {
                    return Err(MemoryError::NotEmpty(segments.join("/")));
                }
                fs::remove_dir_all(&fs_path)?;
                1 + descendants
            }
        };
        fs::remove_file(self.meta_path(&segments))?;
        Ok(count)
    }

    fn children_of(&self, segments: &[&str]) -> Result<Vec<MemoryNode>, MemoryError> {
        let dir = self.fs_path(segments);
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        let mut names: Vec<String> = Vec::new();
        for entry in entries {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(META_SUFFIX) {
                names.push(stem.to_string());
            }
        }
        names.sort();
        for name in names {
            let mut child: Vec<&str> = segments.to_vec();
            child.push(&name);
            out.push(self.read(&child.join("/"))?);
        }
        Ok(out)
    }

    fn descendants(&self, path: &str) -> Result<Vec<MemoryNode>, MemoryError> {
        let segments: Vec<&str> = if path.is_empty() { Vec::new() } else { parse_path(path)? };
        let mut out = Vec::new();
        for child in self.children_of(&segments)? {
            let sub = if child.kind == NodeKind::Internal { self.descendants(&child.path)? } else { Vec::new() };
            out.push(child);
            out.extend(sub);
        }
        Ok(out)
    }

    /// Every node, depth-first in lexicographic order.
    pub fn nodes(&self) -> Result<Vec<MemoryNode>, MemoryError> {
        self.descendants("")
    }

    pub fn leaves(&self) -> Result<Vec<MemoryNode>, MemoryError> {
        Ok(self.nodes()?.into_iter().filter(|n| n.kind == NodeKind::Leaf).collect())
    }

    /// Case-insensitive search over leaf bodies and tags.
    ///
    /// `match_count` is body occurrences plus matching tags; hits rank by tag
    /// hit, then match count (both descending), then path. `tag_filter`
    /// keeps only leaves carrying exactly that tag. An empty query matches
    /// every leaf.
    pub fn search(&self, query: &str, tag_filter: Option<&str>) -> Result<Vec<SearchHit>, MemoryError> {
        let q = query.to_lowercase();
        let mut hits = Vec::new();
        for leaf in self.leaves()? {
            if tag_filter.is_some_and(|t| !leaf.tags.contains(t)) {
                continue;
            }
            let body = leaf.body.to_lowercase();
            let tag_matches = leaf.tags.iter().filter(|t| !q.is_empty() && t.to_lowercase().contains(&q)).count();
            let match_count = count_occurrences(&body, &q) + tag_matches;
            if !q.is_empty() && match_count == 0 {
                continue;
            }
            let snippet = leaf
                .body
                .lines()
                .find(|l| !q.is_empty() && l.to_lowercase().contains(&q))
                .map(|l| l.trim().chars().take(120).collect())
                .unwrap_or_else(|| format!("tags: {}", leaf.tags.iter().cloned().collect::<Vec<_>>().join(", ")));
            hits.push(SearchHit { path: leaf.path, snippet, tag_hit: tag_matches > 0, match_count });
        }
        hits.sort_by(|a, b| b.tag_hit.cmp(&a.tag_hit).then(b.match_count.cmp(&a.match_count)).then(a.path.cmp(&b.path)));
        Ok(hits)
    }

    /// Outline of the tree below `prefix` (root when empty or `.`), at most
    /// `depth` levels deep.
    pub fn list_tree(&self, prefix: &str, depth: usize) -> Result<String, MemoryError> {
        let (label, segments) = if prefix.is_empty() || prefix == "." || prefix == "/" {
            (".".to_string(), Vec::new())
        } else {
            let segs = parse_path(prefix)?;
            match self.read_meta(&segs)? {
                Some(m) if m.kind == NodeKind::Internal => {}
                Some(_) => return Ok(format!("{}\n", segs.join("/"))),
                None => return Err(MemoryError::NotFound(prefix.into())),
            }
            (segs.join("/"), segs)
        };
        let root = OutlineNode::branch(label, self.outline_children(&segments, depth)?);
        Ok(outline::render(&root))
    }

    fn outline_children(&self, segments: &[&str], depth: usize) -> Result<Vec<OutlineNode>, MemoryError> {
        if depth == 0 {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for child in self.children_of(segments)? {
            let name = child.path.rsplit('/').next().unwrap_or(&child.path).to_string();
            let children = if child.kind == NodeKind::Internal {
                let segs: Vec<&str> = child.path.split('/').collect();
                self.outline_children(&segs, depth - 1)?
            } else {
                Vec::new()
            };
            out.push(OutlineNode::branch(name, children));
        }
        Ok(out)
    }

    /// Delete every leaf with `scope`. Returns how many were removed.
    pub fn clear_scope(&mut self, scope: Scope) -> usize {
        let Ok(leaves) = self.leaves() else { return 0 };
        leaves
            .into_iter()
            .filter(|l| l.scope == scope && scope != Scope::Session)
            .filter_map(|l| self.delete(&l.path, false).ok())
            .sum()
    }

    /// Leaves visible in `scope`: session nodes always, narrower scopes only
    /// while they are live.
    pub fn visible(&self, scope: Scope) -> Result<Vec<MemoryNode>, MemoryError> {
        Ok(self.leaves()?.into_iter().filter(|l| l.scope <= scope).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn store() -> (tempfile::TempDir, MemoryStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = MemoryStore::open(dir.path().join(".memory")).unwrap();
        (dir, s)
    }

    fn tags(t: &[&str]) -> BTreeSet<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn grouped_leaves_render_as_outline() {
        let (_d, mut s) = store();
        for leaf in ["analysis.md", "implementation_summary.md", "todo.md"] {
            s.write(&format!("qutebrowser_process_cleanup/{leaf}"), "x", tags(&[]), Scope::Session, 1).unwrap();
        }
        let tree = s.list_tree("", 5).unwrap();
        assert_eq!(
            tree,
            ".\n+-- qutebrowser_process_cleanup\n    |-- analysis.md\n    |-- implementation_summary.md\n    +-- todo.md\n"
        );
        assert_eq!(s.list_tree("qutebrowser_process_cleanup", 1).unwrap().lines().count(), 4);
    }

    #[test]
    fn empty_store_is_root_only() {
        let (_d, s) = store();
        assert_eq!(s.list_tree("", 3).unwrap(), ".\n");
        assert!(matches!(s.list_tree("nope", 1), Err(MemoryError::NotFound(_))));
    }

    #[test]
    fn depth_limits_outline() {
        let (_d, mut s) = store();
        s.write("a/b/c/d.md", "x", tags(&[]), Scope::Session, 0).unwrap();
        s.write("e.md", "x", tags(&[]), Scope::Session, 0).unwrap();
        assert_eq!(s.list_tree("", 1).unwrap(), ".\n|-- a\n+-- e.md\n");
    }

    #[test]
    fn overwrite_and_collisions() {
        let (_d, mut s) = store();
        s.write("a", "one", tags(&[]), Scope::Session, 1).unwrap();
        s.write("a", "two", tags(&[]), Scope::Session, 2).unwrap();
        let n = s.read("a").unwrap();
        assert_eq!((n.body.as_str(), n.updated_seq), ("two", 2));
        assert_eq!(s.nodes().unwrap().len(), 1);
        assert!(matches!(s.write("a/b", "x", tags(&[]), Scope::Session, 3), Err(MemoryError::LeafParent(_))));
        s.write("g/x", "x", tags(&[]), Scope::Session, 4).unwrap();
        assert!(matches!(s.write("g", "x", tags(&[]), Scope::Session, 5), Err(MemoryError::PathCollision(_))));
    }

    #[test]
    fn path_validation() {
        for bad in ["", "a//b", "../x", "a/./b", "sp ace", "x.meta.json", "é"] {
            assert!(matches!(parse_path(bad), Err(MemoryError::InvalidPath(_))), "{bad}");
        }
        assert_eq!(parse_path("/a/b.md/").unwrap(), vec!["a", "b.md"]);
    }

    #[test]
    fn edit_and_delete() {
        let (_d, mut s) = store();
        s.write("g/a.md", "foo bar foo", tags(&[]), Scope::Session, 1).unwrap();
        s.write("g/h/b.md", "x", tags(&[]), Scope::Session, 1).unwrap();
        assert_eq!(s.edit("g/a.md", "foo", "baz", 2).unwrap().body, "baz bar foo");
        assert!(matches!(s.edit("g/a.md", "zzz", "y", 3), Err(MemoryError::NoMatch(_))));
        assert!(matches!(s.delete("g", false), Err(MemoryError::NotEmpty(_))));
        assert_eq!(s.delete("g", true).unwrap(), 4);
        assert!(s.nodes().unwrap().is_empty());
        assert!(matches!(s.read("g/a.md"), Err(MemoryError::NotFound(_))));
    }

    #[test]
    fn search_ranks_tag_hits_first() {
        let (_d, mut s) = store();
        s.write("a.md", "TODO todo todo", tags(&[]), Scope::Session, 1).unwrap();
        s.write("b.md", "nothing", tags(&["todo-list"]), Scope::Session, 1).unwrap();
        s.write("c.md", "one todo", tags(&["todo-list"]), Scope::Session, 1).unwrap();
        let paths: Vec<String> = s.search("todo", None).unwrap().into_iter().map(|h| h.path).collect();
        assert_eq!(paths, vec!["c.md", "b.md", "a.md"]);
        let filtered: Vec<String> = s.search("todo", Some("todo-list")).unwrap().into_iter().map(|h| h.path).collect();
        assert_eq!(filtered, vec!["c.md", "b.md"]);
    }

    #[test]
    fn scopes_clear() {
        let (_d, mut s) = store();
        s.write("keep.md", "x", tags(&[]), Scope::Session, 1).unwrap();
        s.write("entry.md", "x", tags(&[]), Scope::Entry, 1).unwrap();
        s.write("run.md", "x", tags(&[]), Scope::Runnable, 1).unwrap();
        assert_eq!(s.visible(Scope::Session).unwrap().len(), 1);
        assert_eq!(s.visible(Scope::Runnable).unwrap().len(), 3);
        assert_eq!(s.clear_scope(Scope::Runnable), 1);
        assert_eq!(s.clear_scope(Scope::Entry), 1);
        assert_eq!(s.clear_scope(Scope::Session), 0);
        let paths: Vec<String> = s.nodes().unwrap().into_iter().map(|n| n.path).collect();
        assert_eq!(paths, vec!["keep.md"]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Write(String, String, Vec<String>),
        Edit(String, String, String),
        Delete(String, bool),
        Search(String, Option<String>),
    }

    fn path_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!["a", "b", "c.md", "d_1", "E-2"]), 1..4).prop_map(|v| v.join("/"))
    }

    fn body_strategy() -> impl Strategy<Value = String> {
        "([a-c]{1,3}|\\+-- |\\|-- |\\n|TODO| ){0,8}"
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (path_strategy(), body_strategy(), proptest::collection::vec(prop::sample::select(vec!["x", "todo", "ab"]), 0..3))
                .prop_map(|(p, b, t)| Op::Write(p, b, t.into_iter().map(String::from).collect())),
            1 => (path_strategy(), "[a-c]{1,2}", "[a-c]{0,2}").prop_map(|(p, f, r)| Op::Edit(p, f, r)),
            1 => (path_strategy(), any::<bool>()).prop_map(|(p, r)| Op::Delete(p, r)),
            2 => ("[a-cA-C]{1,2}|todo|TODO", proptest::option::of(prop::sample::select(vec!["x", "todo"]).prop_map(String::from)))
                .prop_map(|(q, t)| Op::Search(q, t)),
        ]
    }

    /// In-memory model: path -> (body, tags) for leaves; groups implied.
    fn oracle_rank(model: &BTreeMap<String, (String, BTreeSet<String>)>, q: &str, tag: Option<&str>) -> Vec<String> {
        let ql = q.to_lowercase();
        let mut scored: Vec<(bool, usize, String)> = Vec::new();
        for (path, (body, tags)) in model {
            if let Some(t) = tag {
                if !tags.contains(t) {
                    continue;
                }
            }
            let lower = body.to_lowercase();
            let mut count = 0;
            let mut i = 0;
            while let Some(pos) = lower[i..].find(&ql) {
                count += 1;
                i += pos + ql.len();
            }
            let tag_count = tags.iter().filter(|t| t.to_lowercase().contains(&ql)).count();
            if count + tag_count > 0 {
                scored.push((tag_count > 0, count + tag_count, path.clone()));
            }
        }
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        scored.into_iter().map(|s| s.2).collect()
    }

    fn check_well_formed(s: &MemoryStore) {
        let nodes = s.nodes().unwrap();
        let by_path: BTreeMap<&str, &MemoryNode> = nodes.iter().map(|n| (n.path.as_str(), n)).collect();
        for n in &nodes {
            if let Some((parent, _)) = n.path.rsplit_once('/') {
                let p = by_path.get(parent).expect("parent exists");
                assert_eq!(p.kind, NodeKind::Internal);
            }
            if n.kind == NodeKind::Internal {
                assert!(n.body.is_empty());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_op_sequences(ops in proptest::collection::vec(op_strategy(), 1..12)) {
            let (_d, mut s) = store();
            let mut model: BTreeMap<String, (String, BTreeSet<String>)> = BTreeMap::new();
            for (seq, op) in ops.into_iter().enumerate() {
                match op {
                    Op::Write(p, b, t) => {
                        let t: BTreeSet<String> = t.into_iter().collect();
                        if s.write(&p, &b, t.clone(), Scope::Session, seq as u64).is_ok() {
                            prop_assert_eq!(&s.read(&p).unwrap().body, &b);
                            model.insert(p, (b, t));
                        }
                    }
                    Op::Edit(p, f, r) => {
                        if let Ok(n) = s.edit(&p, &f, &r, seq as u64) {
                            model.get_mut(&p).unwrap().0 = n.body;
                        }
                    }
                    Op::Delete(p, r) => {
                        if s.delete(&p, r).is_ok() {
                            let prefix = format!("{p}/");
                            model.retain(|k, _| k != &p && !k.starts_with(&prefix));
                            for hit in s.search("", None).unwrap() {
                                prop_assert!(hit.path != p && !hit.path.starts_with(&prefix));
                            }
                        }
                    }
                    Op::Search(q, t) => {
                        let got: Vec<String> = s.search(&q, t.as_deref()).unwrap().into_iter().map(|h| h.path).collect();
                        prop_assert_eq!(got, oracle_rank(&model, &q, t.as_deref()));
                    }
                }
                check_well_formed(&s);
            }
            let leaves: Vec<String> = s.leaves().unwrap().into_iter().map(|n| n.path).collect();
            prop_assert_eq!(leaves, model.keys().cloned().collect::<Vec<_>>());
        }
    }
}
