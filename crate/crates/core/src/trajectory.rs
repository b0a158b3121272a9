//! Append-only session trajectory and its line-delimited file format.
//!
//! A trajectory file (`<session>.traj.jsonl`) starts with one header record
//! carrying the session id and config reference, followed by one event
//! record per line in `seq` order:
//!
//! ```text
//! {"record":"header","format":"scaffold-trajectory/1","session_id":"s1","config_ref":"agent"}
//! {"record":"event","seq":0,"kind":"session_start","wall_time":"...","payload":{...}}
//! ```
//!
//! Event equality ignores the wall-clock value; replay and determinism checks
//! compare the logical content only.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const FORMAT_TAG: &str = "scaffold-trajectory/1";
pub const FILE_EXTENSION: &str = "traj.jsonl";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("malformed record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trajectory stream has no header record")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    UserMessage,
    LlmRequest,
    LlmResponse,
    ActionParsed,
    ActionExecuted,
    MemoryOp,
    Compression,
    NoteOp,
    ValidationReject,
    SessionStart,
    SessionEnd,
    Warning,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub wall_time: String,
    pub payload: Value,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.kind == other.kind && self.payload == other.payload
    }
}

impl Event {
    pub fn new(seq: u64, kind: EventKind, wall_time: DateTime<Utc>, payload: Value) -> Self {
        Self { seq, kind, wall_time: wall_time.to_rfc3339_opts(SecondsFormat::Millis, true), payload }
    }

    /// String field of the payload, or `""` when absent.
    pub fn str_field(&self, key: &str) -> &str {
        self.payload.get(key).and_then(Value::as_str).unwrap_or("")
    }

    pub fn u64_field(&self, key: &str) -> u64 {
        self.payload.get(key).and_then(Value::as_u64).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub session_id: String,
    pub config_ref: String,
    events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header { format: String, session_id: String, config_ref: String },
    Event(Event),
}

impl Trajectory {
    pub fn new(session_id: impl Into<String>, config_ref: impl Into<String>) -> Self {
        Self { session_id: session_id.into(), config_ref: config_ref.into(), events: Vec::new() }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    /// Append `event`, which must carry the next contiguous sequence number.
    pub fn append_event(&mut self, event: Event) -> Result<(), TrajectoryError> {
        let expected = self.next_seq();
        if event.seq != expected {
            return Err(TrajectoryError::SequenceGap { expected, got: event.seq });
        }
        self.events.push(event);
        Ok(())
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn header_line(&self) -> String {
        let header = Record::Header {
            format: FORMAT_TAG.to_string(),
            session_id: self.session_id.clone(),
            config_ref: self.config_ref.clone(),
        };
        serde_json::to_string(&header).expect("header serializes")
    }

    pub fn serialize(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for event in &self.events {
            out.push_str(&event_line(event));
            out.push('\n');
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self, TrajectoryError> {
        let mut lines = text.split('\n').enumerate().peekable();
        let mut trajectory = match lines.next() {
            Some((_, line)) if !line.trim().is_empty() => match parse_record(line, 1)? {
                Record::Header { session_id, config_ref, .. } => Trajectory::new(session_id, config_ref),
                Record::Event(_) => return Err(TrajectoryError::MissingHeader),
            },
            _ => return Err(TrajectoryError::MissingHeader),
        };
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                // Only the terminator after the last record may be empty.
                if text.split('\n').skip(idx + 1).any(|l| !l.is_empty()) {
                    return Err(TrajectoryError::Malformed { line: line_no, reason: "empty line".into() });
                }
                continue;
            }
            match parse_record(line, line_no)? {
                Record::Event(event) => trajectory.append_event(event).map_err(|e| TrajectoryError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                })?,
                Record::Header { .. } => {
                    return Err(TrajectoryError::Malformed { line: line_no, reason: "duplicate header".into() })
                }
            }
        }
        Ok(trajectory)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TrajectoryError> {
        Self::deserialize(&std::fs::read_to_string(path)?)
    }
}

fn event_line(event: &Event) -> String {
    serde_json::to_string(&Record::Event(event.clone())).expect("event serializes")
}

fn parse_record(line: &str, line_no: usize) -> Result<Record, TrajectoryError> {
    serde_json::from_str(line).map_err(|e| TrajectoryError::Malformed { line: line_no, reason: e.to_string() })
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock frozen at one instant; used for byte-level determinism checks.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Default for FixedClock {
    fn default() -> Self {
        Self(DateTime::<Utc>::UNIX_EPOCH)
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Observer notified after every recorded event.
pub trait EventSink: Send {
    fn on_event(&mut self, event: &Event) -> io::Result<()>;
}

/// Streams the trajectory file as events are recorded.
pub struct JsonlSink<W: Write + Send> {
    writer: W,
}

impl<W: Write + Send> JsonlSink<W> {
    pub fn new(mut writer: W, trajectory: &Trajectory) -> io::Result<Self> {
        writeln!(writer, "{}", trajectory.header_line())?;
        for event in trajectory.events() {
            writeln!(writer, "{}", event_line(event))?;
        }
        Ok(Self { writer })
    }
}

impl<W: Write + Send> EventSink for JsonlSink<W> {
    fn on_event(&mut self, event: &Event) -> io::Result<()> {
        writeln!(self.writer, "{}", event_line(event))?;
        self.writer.flush()
    }
}

/// Single writer for a session's trajectory.
pub struct Recorder {
    trajectory: Trajectory,
    clock: Arc<dyn Clock>,
    sinks: Vec<Box<dyn EventSink>>,
    sink_error: Option<io::Error>,
}

impl Recorder {
    pub fn new(trajectory: Trajectory, clock: Arc<dyn Clock>) -> Self {
        Self { trajectory, clock, sinks: Vec::new(), sink_error: None }
    }

    pub fn add_sink(&mut self, sink: Box<dyn EventSink>) {
        self.sinks.push(sink);
    }

    pub fn next_seq(&self) -> u64 {
        self.trajectory.next_seq()
    }

    /// Record an event and return its sequence number.
    pub fn record(&mut self, kind: EventKind, payload: Value) -> u64 {
        let seq = self.trajectory.next_seq();
        let event = Event::new(seq, kind, self.clock.now(), payload);
        for sink in &mut self.sinks {
            if let Err(e) = sink.on_event(&event) {
                self.sink_error.get_or_insert(e);
            }
        }
        self.trajectory.append_event(event).expect("recorder assigns contiguous seq");
        seq
    }

    pub fn warn(&mut self, source: &str, message: impl Into<String>) -> u64 {
        self.record(EventKind::Warning, serde_json::json!({ "source": source, "message": message.into() }))
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn snapshot(&self) -> Trajectory {
        self.trajectory.clone()
    }

    pub fn take_sink_error(&mut self) -> Option<io::Error> {
        self.sink_error.take()
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }
}
