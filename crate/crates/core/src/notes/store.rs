use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use walkdir::WalkDir;

use super::{check_path, Note, NoteError};
use crate::outline::{self, OutlineNode};

const README: &str = "README.md";
const LOCK: &str = ".lock";
const LOCK_WAIT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("notes io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("note {path}: {source}")]
    Note { path: String, source: NoteError },
    #[error("notes store at {0} is locked by another writer")]
    Locked(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PersistReport {
    /// Paths written, in input order.
    pub written: Vec<String>,
    pub warnings: Vec<String>,
}

/// Held while writing; removes the lock file on drop.
struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(LOCK);
        let start = Instant::now();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self(path)),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_WAIT {
                        return Err(StoreError::Locked(root.to_path_buf()));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A notes directory: `shared/`, `projects/<project>/` and a generated
/// `README.md` index.
#[derive(Debug, Clone)]
pub struct NoteStore {
    root: PathBuf,
}

impl NoteStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Every note, sorted by path.
    pub fn load_all(&self) -> Result<Vec<Note>, StoreError> {
        let mut notes = Vec::new();
        for sub in ["projects", "shared"] {
            let dir = self.root.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for entry in WalkDir::new(&dir).sort_by_file_name() {
                let entry = entry.map_err(|e| StoreError::Io { path: dir.clone(), source: e.into() })?;
                if !entry.file_type().is_file() || entry.path().extension().is_none_or(|e| e != "md") {
                    continue;
                }
                let rel = self.relative(entry.path());
                notes.push(self.read(&rel)?);
            }
        }
        notes.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(notes)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    pub fn read(&self, path: &str) -> Result<Note, StoreError> {
        check_path(path).map_err(|source| StoreError::Note { path: path.into(), source })?;
        let file = self.root.join(path);
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        Note::parse(path, &text).map_err(|source| StoreError::Note { path: path.into(), source })
    }

    /// Write notes and regenerate the README.
    ///
    /// Ids are unique across the store. A note whose id already belongs to a
    /// note at another path is renamed `<id>_2`, `<id>_3`, ... with a
    /// warning; the same path is simply overwritten.
    pub fn persist(&self, notes: &[Note]) -> Result<PersistReport, StoreError> {
        let _lock = WriteLock::acquire(&self.root)?;
        let mut ids: BTreeMap<String, String> = self.load_all()?.into_iter().map(|n| (n.id, n.path)).collect();
        let mut report = PersistReport::default();
        for note in notes {
            note.validate().map_err(|source| StoreError::Note { path: note.path.clone(), source })?;
            let mut note = note.clone();
            if ids.get(&note.id).is_some_and(|p| *p != note.path) {
                let dir = note.path.rsplit_once('/').map(|(d, _)| d.to_string()).unwrap_or_default();
                let base = note.id.clone();
                let mut n = 2;
                loop {
                    let id = format!("{base}_{n}");
                    let path = format!("{dir}/{id}.md");
                    if !ids.contains_key(&id) && !self.root.join(&path).exists() {
                        report.warnings.push(format!("note id `{base}` already exists at {}; saved as {path}", ids[&base]));
                        note.id = id;
                        note.path = path;
                        break;
                    }
                    n += 1;
                }
            }
            let file = self.root.join(&note.path);
            if let Some(parent) = file.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&file, note.render()).map_err(io_err(&file))?;
            ids.insert(note.id.clone(), note.path.clone());
            report.written.push(note.path);
        }
        self.write_readme()?;
        Ok(report)
    }

    pub fn render_readme(notes: &[Note]) -> String {
        let mut out = String::from(
            "# Notes\n\nKnowledge distilled from earlier sessions.\n\n\
             - `shared/<topic>/` holds insights that apply across many projects.\n\
             - `projects/<project>/` holds knowledge specific to one project.\n\n\
             Each note starts with front matter (id, title, description, keywords). \
             Skim the index, then open the notes that match your task.\n\n## Index\n\n",
        );
        for n in notes {
            out.push_str(&format!("- [{}]({}): {}\n", n.title, n.path, n.description));
        }
        out
    }

    pub fn write_readme(&self) -> Result<String, StoreError> {
        let text = Self::render_readme(&self.load_all()?);
        let file = self.root.join(README);
        fs::write(&file, &text).map_err(io_err(&file))?;
        Ok(text)
    }

    /// Paths listed in the README index.
    pub fn readme_entries(&self) -> Result<BTreeSet<String>, StoreError> {
        let file = self.root.join(README);
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(BTreeSet::new()),
            Err(e) => return Err(io_err(&file)(e)),
        };
        Ok(text
            .lines()
            .filter_map(|l| l.strip_prefix("- ["))
            .filter_map(|l| l.split_once("](").and_then(|(_, rest)| rest.split_once(')')).map(|(p, _)| p.to_string()))
            .collect())
    }

    /// Rank notes for `query`. Each query term scores 3 if a keyword
    /// contains it, 2 if the title does and 1 if the body does
    /// (case-insensitive); ties break by path.
    pub fn search(&self, query: &str) -> Result<Vec<(String, u32)>, StoreError> {
        Ok(score_notes(&self.load_all()?, query))
    }

    /// Outline of the store, names sorted case-insensitively.
    pub fn tree(&self) -> String {
        fn build(dir: &Path) -> Vec<OutlineNode> {
            let mut entries: Vec<(String, bool)> = fs::read_dir(dir)
                .map(|rd| {
                    rd.filter_map(Result::ok)
                        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path().is_dir()))
                        .filter(|(n, _)| !n.starts_with('.'))
                        .collect()
                })
                .unwrap_or_default();
            entries.sort_by(|a, b| a.0.to_lowercase().cmp(&b.0.to_lowercase()).then(a.0.cmp(&b.0)));
            entries
                .into_iter()
                .map(|(name, is_dir)| if is_dir { OutlineNode::branch(name.clone(), build(&dir.join(&name))) } else { OutlineNode::leaf(name) })
                .collect()
        }
        outline::render(&OutlineNode::branch(".", build(&self.root)))
    }
}

pub(crate) fn score_notes(notes: &[Note], query: &str) -> Vec<(String, u32)> {
    let terms: Vec<String> = query.split_whitespace().map(str::to_lowercase).collect();
    let mut scored: Vec<(String, u32)> = notes
        .iter()
        .filter_map(|n| {
            let keywords: Vec<String> = n.keywords.iter().map(|k| k.to_lowercase()).collect();
            let title = n.title.to_lowercase();
            let body = n.body.to_lowercase();
            let score: u32 = terms
                .iter()
                .map(|t| {
                    3 * u32::from(keywords.iter().any(|k| k.contains(t.as_str())))
                        + 2 * u32::from(title.contains(t.as_str()))
                        + u32::from(body.contains(t.as_str()))
                })
                .sum();
            (score > 0).then(|| (n.path.clone(), score))
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}
