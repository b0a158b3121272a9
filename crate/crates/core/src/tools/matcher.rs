//! Locating an edit target from a `line_number|content` spec.
//!
//! A spec lists file lines with their 1-based numbers. Line numbers fix the
//! relative layout of the spec lines; content decides exactness. A match
//! anywhere in the file counts as exact (the nearest one to the stated
//! position wins). Otherwise every window of the spec's span length is
//! scored by `2 * LCS / (window_len + spec_len)` over whole lines and the
//! best one is reported in a failure message.

use std::fmt::Write as _;

use similar::{ChangeTag, TextDiff};
use thiserror::Error;

use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindMode {
    Find,
    FindAfter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecLine {
    pub line_number: usize,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindSpec {
    pub mode: FindMode,
    pub lines: Vec<SpecLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("the search spec is empty")]
    Empty,
    #[error("line {0} of the search spec is not in `<line_number>|<exact_line_content>` format")]
    Malformed(usize),
    #[error("line numbers in the search spec must be at least 1 and strictly increasing (line {0})")]
    NotIncreasing(usize),
}

impl FindSpec {
    /// Parse `n|content` lines. One leading and one trailing newline are
    /// ignored so the spec may sit on its own lines inside a tag.
    pub fn parse(mode: FindMode, text: &str) -> Result<Self, SpecError> {
        let text = text.strip_prefix('\n').unwrap_or(text);
        let text = text.strip_suffix('\n').unwrap_or(text);
        if text.trim().is_empty() {
            return Err(SpecError::Empty);
        }
        let mut lines: Vec<SpecLine> = Vec::new();
        for (i, raw) in text.split('\n').enumerate() {
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            let (num, content) = raw.split_once('|').ok_or(SpecError::Malformed(i + 1))?;
            let line_number: usize = num.trim().parse().map_err(|_| SpecError::Malformed(i + 1))?;
            if line_number == 0 || lines.last().is_some_and(|l| l.line_number >= line_number) {
                return Err(SpecError::NotIncreasing(i + 1));
            }
            lines.push(SpecLine { line_number, content: content.to_string() });
        }
        Ok(Self { mode, lines })
    }

    pub fn first_line(&self) -> usize {
        self.lines[0].line_number
    }

    /// Number of file lines the spec covers, gaps included.
    pub fn span_len(&self) -> usize {
        self.lines.last().map(|l| l.line_number).unwrap_or(0) + 1 - self.first_line()
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, &str)> {
        let first = self.first_line();
        self.lines.iter().map(move |l| (l.line_number - first, l.content.as_str()))
    }

    pub fn contents(&self) -> Vec<&str> {
        self.lines.iter().map(|l| l.content.as_str()).collect()
    }
}

/// A located span: 0-based start line and length.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub start: usize,
    pub len: usize,
    pub similarity: f64,
    /// Set when the exact content sat away from the stated line numbers.
    pub shifted_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub start: usize,
    pub len: usize,
    pub lcs: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchFailure {
    pub best: Option<Candidate>,
    /// Windows sharing the best score.
    pub tied: usize,
    pub message: String,
}

/// Split file content into lines the way the matcher sees them.
pub fn file_lines(content: &str) -> Vec<&str> {
    content.lines().collect()
}

/// Longest common subsequence length over lines.
pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn similarity(lcs: usize, window_len: usize, spec_len: usize) -> f64 {
    if window_len + spec_len == 0 {
        return 0.0;
    }
    2.0 * lcs as f64 / (window_len + spec_len) as f64
}

fn exact_at(lines: &[&str], spec: &FindSpec, start: usize) -> bool {
    spec.offsets().all(|(off, content)| lines.get(start + off) == Some(&content))
}

/// Best fuzzy window for `spec`, with the number of windows tied with it.
pub fn best_candidate(lines: &[&str], spec: &FindSpec) -> Option<(Candidate, usize)> {
    let spec_contents = spec.contents();
    let want = spec.first_line() - 1;
    let window = spec.span_len().min(lines.len());
    if window == 0 {
        return None;
    }
    let mut best: Option<Candidate> = None;
    let mut tied = 0;
    for start in 0..=lines.len() - window {
        let lcs = lcs_len(&lines[start..start + window], &spec_contents);
        let cand = Candidate { start, len: window, lcs, similarity: similarity(lcs, window, spec_contents.len()) };
        match &best {
            None => {
                best = Some(cand);
                tied = 1;
            }
            Some(b) if lcs > b.lcs => {
                best = Some(cand);
                tied = 1;
            }
            Some(b) if lcs == b.lcs => {
                tied += 1;
                if start.abs_diff(want) < b.start.abs_diff(want) {
                    best = Some(cand);
                }
            }
            Some(_) => {}
        }
    }
    best.map(|b| (b, tied))
}

/// Locate `spec` in `content`.
pub fn match_chunk(content: &str, spec: &FindSpec, failure_template: &str) -> Result<Match, MatchFailure> {
    let lines = file_lines(content);
    let want = spec.first_line() - 1;
    let span = spec.span_len();
    if lines.len() >= span {
        let exact = (0..=lines.len() - span)
            .filter(|&s| exact_at(&lines, spec, s))
            .min_by_key(|&s| (s.abs_diff(want), s));
        if let Some(start) = exact {
            return Ok(Match { start, len: span, similarity: 1.0, shifted_from: (start != want).then_some(spec.first_line()) });
        }
    }
    let best = best_candidate(&lines, spec);
    let details = describe_failure(&lines, spec, best.as_ref());
    let message = prompts::render(failure_template, &[("match_details", &details)]);
    let (best, tied) = match best {
        Some((c, t)) => (Some(c), t),
        None => (None, 0),
    };
    Err(MatchFailure { best, tied, message })
}

fn describe_failure(lines: &[&str], spec: &FindSpec, best: Option<&(Candidate, usize)>) -> String {
    let Some((cand, tied)) = best else {
        return "The file is empty, so there is nothing to match against.".into();
    };
    let mut out = format!(
        "Closest match (lines {}-{}, similarity {:.2}):\n",
        cand.start + 1,
        cand.start + cand.len,
        cand.similarity
    );
    for (i, line) in lines[cand.start..cand.start + cand.len].iter().enumerate() {
        let _ = writeln!(out, "{}|{}", cand.start + i + 1, line);
    }
    if *tied > 1 {
        let _ = writeln!(out, "({tied} candidate regions are equally similar; showing the one nearest line {}.)", spec.first_line());
    }
    let expected = spec.contents().join("\n") + "\n";
    let found = lines[cand.start..cand.start + cand.len].join("\n") + "\n";
    out.push_str("\nDiff from your search lines to the file (- yours, + file):\n");
    out.push_str(&minimal_diff(&expected, &found));
    out.trim_end().to_string()
}

/// Zero-context line diff.
pub fn minimal_diff(old: &str, new: &str) -> String {
    TextDiff::from_lines(old, new).unified_diff().context_radius(0).header("search", "file").to_string()
}

/// Line-oriented diff listing every line, for user-facing views.
pub fn full_diff(old: &str, new: &str) -> String {
    let mut out = String::new();
    for change in TextDiff::from_lines(old, new).iter_all_changes() {
        let sign = match change.tag() {
            ChangeTag::Delete => "- ",
            ChangeTag::Insert => "+ ",
            ChangeTag::Equal => continue,
        };
        out.push_str(sign);
        out.push_str(change.value().trim_end_matches('\n'));
        out.push('\n');
    }
    out
}
