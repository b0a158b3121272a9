//! Persistent cross-session notes.
//!
//! A note is a markdown file with a front-matter block:
//!
//! ```text
//! ---
//! id: escaping_wildcards_in_infobase_queries
//! title: Escaping Wildcards in Infobase Queries
//! description: How to handle asterisk characters in Infobase queries
//! keywords:
//!     - infobase
//!     - wildcards
//! kind: solution
//! origin_session: s-0001
//! ---
//! <body>
//! ```
//!
//! `kind` and `origin_session` are optional. Notes live under `shared/` or
//! `projects/<project>/`; the id equals the file stem.

mod distill;
mod extension;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distill::{distill, infer_kind, Distilled, DistillError, ReferenceNoteBackend, REFERENCE_NOTES};
pub use extension::NotesExtension;
pub use store::{NoteStore, PersistReport, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    Solution,
    Finding,
    Hindsight,
}

impl NoteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoteKind::Solution => "solution",
            NoteKind::Finding => "finding",
            NoteKind::Hindsight => "hindsight",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "solution" => Some(NoteKind::Solution),
            "finding" => Some(NoteKind::Finding),
            "hindsight" => Some(NoteKind::Hindsight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    /// Root-relative path, e.g. `shared/python/x.md`.
    pub path: String,
    pub id: String,
    pub title: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub kind: Option<NoteKind>,
    pub origin_session: Option<String>,
    /// Everything after the closing `---` line.
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NoteError {
    #[error("note must start with a `---` line")]
    MissingOpenFence,
    #[error("front matter is not closed by a `---` line")]
    MissingCloseFence,
    #[error("front matter line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("front matter is missing `{0}`")]
    MissingField(&'static str),
    #[error("keywords must not be empty")]
    NoKeywords,
    #[error("id `{id}` does not match the file name `{path}`")]
    IdMismatch { id: String, path: String },
    #[error("invalid note path `{0}`: use shared/<topic>/<id>.md or projects/<project>/<id>.md")]
    BadPath(String),
    #[error("field `{0}` must be a single line")]
    Multiline(&'static str),
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Check a note path's layout and return the file stem.
pub fn check_path(path: &str) -> Result<&str, NoteError> {
    let bad = || NoteError::BadPath(path.to_string());
    let segments: Vec<&str> = path.split('/').collect();
    if !segments.iter().all(|s| valid_segment(s)) {
        return Err(bad());
    }
    let min = match segments.first() {
        Some(&"shared") => 2,
        Some(&"projects") => 3,
        _ => return Err(bad()),
    };
    if segments.len() < min {
        return Err(bad());
    }
    segments.last().and_then(|f| f.strip_suffix(".md")).filter(|s| !s.is_empty()).ok_or_else(bad)
}

impl Note {
    /// Parse a note file. `path` supplies the location; it is not validated
    /// here.
    pub fn parse(path: &str, text: &str) -> Result<Self, NoteError> {
        let rest = text.strip_prefix("---\n").ok_or(NoteError::MissingOpenFence)?;
        let mut offset = 0;
        let mut header_end = None;
        for line in rest.split_inclusive('\n') {
            if line == "---\n" || line == "---" {
                header_end = Some((offset, offset + line.len()));
                break;
            }
            offset += line.len();
        }
        let (fm_end, body_start) = header_end.ok_or(NoteError::MissingCloseFence)?;
        let header = &rest[..fm_end];
        let body = rest[body_start..].to_string();

        let (mut id, mut title, mut description) = (None, None, None);
        let (mut kind, mut origin_session) = (None, None);
        let mut keywords: Option<Vec<String>> = None;
        let mut in_keywords = false;
        for (i, line) in header.lines().enumerate() {
            let bad = |reason: &str| NoteError::BadLine { line: i + 2, reason: reason.into() };
            if let Some(kw) = line.strip_prefix("    - ") {
                if !in_keywords {
                    return Err(bad("list item outside `keywords:`"));
                }
                keywords.get_or_insert_with(Vec::new).push(kw.to_string());
                continue;
            }
            in_keywords = false;
            let (key, value) = line.split_once(':').ok_or_else(|| bad("expected `key: value`"))?;
            let value = value.strip_prefix(' ').unwrap_or(value).to_string();
            match key {
                "id" => id = Some(value),
                "title" => title = Some(value),
                "description" => description = Some(value),
                "keywords" if value.is_empty() => {
                    in_keywords = true;
                    keywords.get_or_insert_with(Vec::new);
                }
                "kind" => kind = Some(NoteKind::parse(&value).ok_or_else(|| bad("kind must be solution, finding or hindsight"))?),
                "origin_session" => origin_session = Some(value),
                _ => return Err(bad("unknown key")),
            }
        }
        let note = Note {
            path: path.to_string(),
            id: id.ok_or(NoteError::MissingField("id"))?,
            title: title.ok_or(NoteError::MissingField("title"))?,
            description: description.ok_or(NoteError::MissingField("description"))?,
            keywords: keywords.ok_or(NoteError::MissingField("keywords"))?,
            kind,
            origin_session,
            body,
        };
        if note.keywords.is_empty() {
            return Err(NoteError::NoKeywords);
        }
        Ok(note)
    }

    /// Full validation: fields, layout and id/file-name agreement.
    pub fn validate(&self) -> Result<(), NoteError> {
        for (name, value) in [("id", &self.id), ("title", &self.title), ("description", &self.description)] {
            if value.contains('\n') {
                return Err(NoteError::Multiline(name));
            }
            if value.trim().is_empty() {
                return Err(NoteError::MissingField(name));
            }
        }
        if self.keywords.is_empty() {
            return Err(NoteError::NoKeywords);
        }
        if self.keywords.iter().any(|k| k.contains('\n') || k.trim().is_empty()) {
            return Err(NoteError::Multiline("keywords"));
        }
        let stem = check_path(&self.path)?;
        if stem != self.id {
            return Err(NoteError::IdMismatch { id: self.id.clone(), path: self.path.clone() });
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!("---\nid: {}\ntitle: {}\ndescription: {}\nkeywords:\n", self.id, self.title, self.description);
        for k in &self.keywords {
            out.push_str(&format!("    - {k}\n"));
        }
        if let Some(kind) = self.kind {
            out.push_str(&format!("kind: {}\n", kind.as_str()));
        }
        if let Some(s) = &self.origin_session {
            out.push_str(&format!("origin_session: {s}\n"));
        }
        out.push_str("---\n");
        out.push_str(&self.body);
        out
    }
}
