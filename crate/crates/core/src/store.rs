//! Append-only transcript files, one newline-delimited JSON file per session.
//!
//! ```text
//! {"kind":"header","session_id":"..","scenario_id":"..","started_at":".."}
//! {"kind":"turn","index":0,"speaker":"system","origin":"scripted",...}
//! {"kind":"gate_event","turn_index":4,"stage_a":{...},"final":"not_relevant",...}
//! {"kind":"status","status":"completed","at":".."}
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{FailOpen, GateTrace, SessionState, SessionStatus};
use crate::relevance::{Relevance, ShortCircuit, Verdict};
use crate::transcript::{Origin, Turn};

pub const SESSION_FILE_EXT: &str = "jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateEvent {
    /// Index of the open learner turn that was judged.
    pub turn_index: usize,
    pub stage_a: Verdict,
    #[serde(default)]
    pub interrogative: Option<Verdict>,
    #[serde(rename = "final")]
    pub final_verdict: Relevance,
    #[serde(default)]
    pub generated_turn_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_circuit: Option<ShortCircuit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_open: Option<FailOpen>,
}

impl From<&GateTrace> for GateEvent {
    fn from(t: &GateTrace) -> Self {
        Self {
            turn_index: t.learner_turn_index,
            stage_a: t.stage_a.clone(),
            interrogative: t.interrogative.clone(),
            final_verdict: t.verdict,
            generated_turn_index: t.generated_turn_index,
            short_circuit: t.short_circuit,
            fail_open: t.fail_open.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub scenario_id: String,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub session_id: String,
    pub scenario_id: String,
    pub started_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub turns: Vec<Turn>,
    pub gate_events: Vec<GateEvent>,
}

impl TranscriptRecord {
    /// Snapshot of an in-memory session, e.g. for metrics without a store.
    pub fn from_state(state: &SessionState, started_at: DateTime<Utc>, gate_events: Vec<GateEvent>) -> Self {
        Self {
            session_id: state.session_id.clone(),
            scenario_id: state.scenario_id.clone(),
            started_at,
            status: state.status,
            turns: state.transcript.clone(),
            gate_events,
        }
    }

    pub fn gate_event_for(&self, turn_index: usize) -> Option<&GateEvent> {
        self.gate_events.iter().find(|e| e.turn_index == turn_index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(SessionHeader),
    Turn(Turn),
    GateEvent(GateEvent),
    Status { status: SessionStatus, at: DateTime<Utc> },
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("session id `{0}` is not a valid file name")]
    BadSessionId(String),
    #[error("session `{0}` is already {1}")]
    Closed(String, SessionStatus),
    #[error("turn index {got} out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },
    #[error("gate event invalid: {0}")]
    BadGateEvent(String),
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_owned(),
        source,
    }
}

/// A directory of session files.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, session_id: &str) -> Result<PathBuf, StorageError> {
        let valid = !session_id.is_empty()
            && session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !session_id.starts_with('.');
        if !valid {
            return Err(StorageError::BadSessionId(session_id.to_owned()));
        }
        Ok(self.dir.join(format!("{session_id}.{SESSION_FILE_EXT}")))
    }

    /// Writer for a new session. The file is created on the first append.
    pub fn writer(&self, header: SessionHeader) -> Result<SessionWriter, StorageError> {
        let path = self.path_for(&header.session_id)?;
        Ok(SessionWriter {
            path,
            header,
            created: false,
            status: SessionStatus::Active,
            origins: Vec::new(),
        })
    }

    pub fn load(&self, session_id: &str) -> Result<TranscriptRecord, StorageError> {
        load_record(&self.path_for(session_id)?)
    }

    /// Every session file in the directory, ordered by session id.
    pub fn load_all(&self) -> Result<Vec<TranscriptRecord>, StorageError> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let path = entry.map_err(io_err(&self.dir))?.path();
            if path.extension().is_some_and(|e| e == SESSION_FILE_EXT) && path.is_file() {
                paths.push(path);
            }
        }
        let mut records = paths.iter().map(|p| load_record(p)).collect::<Result<Vec<_>, _>>()?;
        records.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(records)
    }
}

/// Appends one session's turns, checking ordering and gate-event references.
#[derive(Debug)]
pub struct SessionWriter {
    path: PathBuf,
    header: SessionHeader,
    created: bool,
    status: SessionStatus,
    origins: Vec<Origin>,
}

impl SessionWriter {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn turns_written(&self) -> usize {
        self.origins.len()
    }

    fn write_lines(&mut self, lines: &[Line]) -> Result<(), StorageError> {
        let mut buf = Vec::new();
        if !self.created {
            serde_json::to_writer(&mut buf, &Line::Header(self.header.clone())).expect("header serializes");
            buf.push(b'\n');
        }
        for line in lines {
            serde_json::to_writer(&mut buf, line).expect("store lines serialize");
            buf.push(b'\n');
        }
        // The first write must create the file; never append to another session's transcript.
        let mut file = OpenOptions::new()
            .create_new(!self.created)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        file.write_all(&buf).map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))?;
        self.created = true;
        Ok(())
    }

    /// Appends `turn`, then `gate_event` if given. The event may reference
    /// `turn` itself as its generated turn.
    pub fn append_turn(&mut self, turn: &Turn, gate_event: Option<&GateEvent>) -> Result<(), StorageError> {
        if self.status != SessionStatus::Active {
            return Err(StorageError::Closed(self.header.session_id.clone(), self.status));
        }
        if turn.index != self.origins.len() {
            return Err(StorageError::OutOfOrder {
                expected: self.origins.len(),
                got: turn.index,
            });
        }
        if let Some(event) = gate_event {
            let origin_at = |i: usize| {
                if i == turn.index {
                    Some(turn.origin)
                } else {
                    self.origins.get(i).copied()
                }
            };
            if origin_at(event.turn_index) != Some(Origin::LearnerOpen) {
                return Err(StorageError::BadGateEvent(format!(
                    "turn_index {} is not an open learner turn",
                    event.turn_index
                )));
            }
            if let Some(g) = event.generated_turn_index {
                if origin_at(g) != Some(Origin::Generated) {
                    return Err(StorageError::BadGateEvent(format!(
                        "generated_turn_index {g} does not point at a generated turn"
                    )));
                }
            }
        }
        let mut lines = vec![Line::Turn(turn.clone())];
        if let Some(event) = gate_event {
            lines.push(Line::GateEvent(event.clone()));
        }
        self.write_lines(&lines)?;
        self.origins.push(turn.origin);
        Ok(())
    }

    /// Records the final status. Closing twice is a no-op.
    pub fn finish(&mut self, status: SessionStatus, at: DateTime<Utc>) -> Result<(), StorageError> {
        if self.status != SessionStatus::Active || status == SessionStatus::Active {
            return Ok(());
        }
        self.write_lines(&[Line::Status { status, at }])?;
        self.status = status;
        Ok(())
    }
}

pub fn load_record(path: &Path) -> Result<TranscriptRecord, StorageError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let corrupt = |line: usize, reason: String| StorageError::Corrupt {
        path: path.to_owned(),
        line,
        reason,
    };

    let mut header: Option<SessionHeader> = None;
    let mut record_status = SessionStatus::Active;
    let mut turns = Vec::new();
    let mut gate_events = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        let parsed: Line = match serde_json::from_str(text) {
            Ok(line) => line,
            // A torn final write loses only the in-flight line.
            Err(_) if !complete => break,
            Err(e) => return Err(corrupt(line_no, e.to_string())),
        };
        match parsed {
            Line::Header(h) if header.is_none() && line_no == 1 => header = Some(h),
            Line::Header(_) => return Err(corrupt(line_no, "unexpected header".into())),
            _ if header.is_none() => return Err(corrupt(line_no, "missing header".into())),
            Line::Turn(t) => {
                if t.index != turns.len() {
                    return Err(corrupt(line_no, format!("turn index {} out of order", t.index)));
                }
                turns.push(t);
            }
            Line::GateEvent(e) => gate_events.push(e),
            Line::Status { status, .. } => record_status = status,
        }
    }
    let header = header.ok_or_else(|| corrupt(0, "empty session file".into()))?;
    Ok(TranscriptRecord {
        session_id: header.session_id,
        scenario_id: header.scenario_id,
        started_at: header.started_at,
        status: record_status,
        turns,
        gate_events,
    })
}

/// Gate events by the learner turn they judge.
pub fn gate_events_by_turn(record: &TranscriptRecord) -> HashMap<usize, &GateEvent> {
    record.gate_events.iter().map(|e| (e.turn_index, e)).collect()
}
