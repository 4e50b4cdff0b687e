//! Line-delimited JSON feedback log and its replayed snapshot.
//!
//! One record per line. Appends write a whole line in one call, so an abrupt
//! stop can leave at most one partial line at the end of the file; readers
//! drop it and [`LogWriter::open`] truncates it before appending again.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ClickEvent, FeedbackEvent, Impression, ImpressionId, Session, SessionId, Task, Timestamp,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt log record at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("inconsistent log at line {line}: {message}")]
    Integrity { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOpened {
    pub session_id: SessionId,
    pub site_user: String,
    pub ts: Timestamp,
}

/// A page served by the baseline alone. Logged as traffic, never judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineOnlyRequest {
    pub session_id: SessionId,
    pub task: Task,
    pub request: String,
    pub page: usize,
    pub rpp: usize,
    pub base_system: String,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Session(SessionOpened),
    Request(BaselineOnlyRequest),
    Impression(Impression),
    Feedback(FeedbackEvent),
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("log records always serialize");
        line.push('\n');
        line
    }
}

/// Parses complete lines; a trailing fragment without a newline is ignored.
pub fn parse_log_str(text: &str) -> Result<Vec<LogRecord>, StoreError> {
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_log(path: &Path) -> Result<Vec<LogRecord>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_log_str(&text)
}

/// Appends records to a log file, one flushed line per record.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    /// Opens (or creates) the log, drops a partial trailing line if present,
    /// and returns the records already stored.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogRecord>), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io_err(path))?;
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        if keep < text.len() {
            file.set_len(keep as u64).map_err(io_err(path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        }
        let records = parse_log_str(&text[..keep])?;
        Ok((
            Self {
                path: path.to_owned(),
                file,
            },
            records,
        ))
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), StoreError> {
        self.file
            .write_all(record.to_line().as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// The log replayed into lookup structures. Referential integrity is checked
/// while replaying.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub sessions: BTreeMap<SessionId, Session>,
    pub impressions: Vec<Impression>,
    pub requests: Vec<BaselineOnlyRequest>,
    /// All clicks per impression, across feedback events, in log order.
    pub clicks: HashMap<ImpressionId, Vec<ClickEvent>>,
    pub feedback_events: usize,
    impression_index: HashMap<ImpressionId, usize>,
}

impl Snapshot {
    pub fn from_records(records: &[LogRecord]) -> Result<Self, StoreError> {
        let mut snap = Snapshot::default();
        for (i, record) in records.iter().enumerate() {
            let line = i + 1;
            let integrity = |message: String| StoreError::Integrity { line, message };
            match record {
                LogRecord::Session(s) => {
                    if snap.sessions.contains_key(&s.session_id) {
                        return Err(integrity(format!("session {} opened twice", s.session_id)));
                    }
                    snap.sessions.insert(
                        s.session_id,
                        Session {
                            session_id: s.session_id,
                            site_user: s.site_user.clone(),
                            start: s.ts,
                            end: s.ts,
                            impression_ids: Vec::new(),
                        },
                    );
                }
                LogRecord::Request(r) => {
                    let session = snap
                        .sessions
                        .get_mut(&r.session_id)
                        .ok_or_else(|| integrity(format!("unknown session {}", r.session_id)))?;
                    session.end = session.end.max(r.ts);
                    snap.requests.push(r.clone());
                }
                LogRecord::Impression(imp) => {
                    if snap.impression_index.contains_key(&imp.impression_id) {
                        return Err(integrity(format!(
                            "impression {} recorded twice",
                            imp.impression_id
                        )));
                    }
                    let session = snap
                        .sessions
                        .get_mut(&imp.session_id)
                        .ok_or_else(|| integrity(format!("unknown session {}", imp.session_id)))?;
                    session.end = session.end.max(imp.ts);
                    session.impression_ids.push(imp.impression_id);
                    snap.impression_index
                        .insert(imp.impression_id, snap.impressions.len());
                    snap.impressions.push(imp.clone());
                }
                LogRecord::Feedback(fb) => {
                    let imp = snap.impression(fb.impression_id).ok_or_else(|| {
                        integrity(format!("feedback for unknown impression {}", fb.impression_id))
                    })?;
                    if let Some(click) = fb.clicks.iter().find(|c| !imp.interleaved.contains(&c.docid)) {
                        return Err(integrity(format!(
                            "click on '{}' which impression {} did not show",
                            click.docid, fb.impression_id
                        )));
                    }
                    snap.clicks
                        .entry(fb.impression_id)
                        .or_default()
                        .extend(fb.clicks.iter().cloned());
                    snap.feedback_events += 1;
                }
            }
        }
        Ok(snap)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_records(&load_log(path)?)
    }

    pub fn impression(&self, id: ImpressionId) -> Option<&Impression> {
        self.impression_index.get(&id).map(|&i| &self.impressions[i])
    }

    pub fn clicks_of(&self, id: ImpressionId) -> &[ClickEvent] {
        self.clicks.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn total_clicks(&self) -> usize {
        self.clicks.values().map(Vec::len).sum()
    }
}
