//! The gateway's feedback store: an append-only log plus the bookkeeping
//! needed to validate feedback and forward entries to a sink.
//!
//! Appends and flushes take separate locks. A flush copies the pending lines
//! under the append lock, then delivers them while requests keep appending.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use livelab_core::store::{LogRecord, LogWriter, Snapshot, StoreError};
use livelab_core::{ImpressionId, InterleavedList, SessionId, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("sink rejected delivery: {0}")]
    Rejected(String),
}

#[derive(Debug, Error)]
pub enum FlushError {
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("cannot persist forwarding cursor {}: {source}", path.display())]
    Cursor {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One log record on its way to the central store. `seq` is its 0-based line
/// number in the log and serves as the idempotency key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardedEntry {
    pub seq: u64,
    pub record: serde_json::Value,
}

/// Receives forwarded entries. Delivering the same `seq` twice must be
/// harmless.
pub trait FeedbackSink: Send + Sync {
    fn deliver(&self, batch: &[ForwardedEntry]) -> Result<(), SinkError>;
}

/// Writes each entry to `<dir>/<seq>.json`; redelivery overwrites the same
/// file with the same content.
#[derive(Debug, Clone)]
pub struct DirectorySink {
    dir: PathBuf,
}

impl DirectorySink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn entry_path(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("{seq:012}.json"))
    }
}

impl FeedbackSink for DirectorySink {
    fn deliver(&self, batch: &[ForwardedEntry]) -> Result<(), SinkError> {
        let io_err = |path: &Path| {
            let path = path.to_owned();
            move |source| SinkError::Io { path, source }
        };
        if !self.dir.is_dir() {
            return Err(SinkError::Io {
                path: self.dir.clone(),
                source: io::Error::new(io::ErrorKind::NotFound, "sink directory missing"),
            });
        }
        for entry in batch {
            let path = self.entry_path(entry.seq);
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, entry.record.to_string()).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// POSTs each batch as a JSON array to a central endpoint.
pub struct HttpSink {
    url: String,
    agent: ureq::Agent,
}

impl HttpSink {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url: url.into(),
            agent: config.into(),
        }
    }
}

impl FeedbackSink for HttpSink {
    fn deliver(&self, batch: &[ForwardedEntry]) -> Result<(), SinkError> {
        let body = serde_json::to_string(batch).expect("entries serialize");
        let resp = self
            .agent
            .post(&self.url)
            .content_type("application/json")
            .send(body)
            .map_err(|e| SinkError::Rejected(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(SinkError::Rejected(format!("status {}", resp.status().as_u16())))
        }
    }
}

/// What an appended feedback event did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub stored: usize,
    pub duplicates: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeedbackRejection {
    #[error("unknown impression {0}")]
    UnknownImpression(ImpressionId),
    #[error("document '{docid}' was not shown in impression {impression}")]
    DocumentNotShown { impression: ImpressionId, docid: String },
}

#[derive(Debug, Error)]
pub enum FeedbackStoreError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rejected(#[from] FeedbackRejection),
    #[error("cannot read forwarding cursor {}: {message}", path.display())]
    Cursor { path: PathBuf, message: String },
}

type ClickKey = (ImpressionId, Timestamp, String, String);

struct Inner {
    writer: LogWriter,
    lines: Vec<String>,
    impressions: HashMap<ImpressionId, InterleavedList>,
    click_keys: HashSet<ClickKey>,
}

/// State recovered from an existing log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recovered {
    pub records: usize,
    pub last_impression: Option<ImpressionId>,
    pub last_session: Option<SessionId>,
}

pub struct FeedbackStore {
    inner: Mutex<Inner>,
    flush_lock: Mutex<()>,
    cursor_path: PathBuf,
    recovered: Recovered,
}

impl FeedbackStore {
    /// Opens or creates the log, dropping a partial trailing line, and
    /// rebuilds the in-memory indexes from what is stored.
    pub fn open(path: &Path) -> Result<Self, FeedbackStoreError> {
        let (writer, records) = LogWriter::open(path)?;
        let snapshot = Snapshot::from_records(&records)?;
        let recovered = Recovered {
            records: records.len(),
            last_impression: snapshot.impressions.iter().map(|i| i.impression_id).max(),
            last_session: snapshot.sessions.keys().next_back().copied(),
        };
        let impressions = snapshot
            .impressions
            .iter()
            .map(|i| (i.impression_id, i.interleaved.clone()))
            .collect();
        let mut click_keys = HashSet::new();
        for record in &records {
            if let LogRecord::Feedback(fb) = record {
                for c in &fb.clicks {
                    click_keys.insert((fb.impression_id, c.ts, c.docid.clone(), c.element.clone()));
                }
            }
        }
        let lines = records
            .iter()
            .map(|r| r.to_line().trim_end().to_owned())
            .collect();
        let cursor_path = cursor_path_for(path);
        let forwarded = read_cursor(&cursor_path)?;
        if forwarded > recovered.records as u64 {
            return Err(FeedbackStoreError::Cursor {
                path: cursor_path,
                message: format!(
                    "cursor {forwarded} is past the end of the log ({} records)",
                    recovered.records
                ),
            });
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                writer,
                lines,
                impressions,
                click_keys,
            }),
            flush_lock: Mutex::new(()),
            cursor_path,
            recovered,
        })
    }

    pub fn recovered(&self) -> Recovered {
        self.recovered
    }

    pub fn path(&self) -> PathBuf {
        self.inner.lock().expect("store lock").writer.path().to_owned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a session, impression or baseline-only record.
    pub fn append(&self, record: &LogRecord) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        inner.writer.append(record)?;
        inner.lines.push(record.to_line().trim_end().to_owned());
        if let LogRecord::Impression(imp) = record {
            inner
                .impressions
                .insert(imp.impression_id, imp.interleaved.clone());
        }
        Ok(())
    }

    pub fn impression(&self, id: ImpressionId) -> Option<InterleavedList> {
        self.inner
            .lock()
            .expect("store lock")
            .impressions
            .get(&id)
            .cloned()
    }

    /// Validates feedback against the stored impression and appends the
    /// clicks not seen before. Clicks are assumed to carry canonical
    /// element names already.
    pub fn append_feedback(
        &self,
        event: &livelab_core::FeedbackEvent,
    ) -> Result<FeedbackAck, FeedbackStoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        let shown = inner
            .impressions
            .get(&event.impression_id)
            .ok_or(FeedbackRejection::UnknownImpression(event.impression_id))?;
        if let Some(c) = event.clicks.iter().find(|c| !shown.contains(&c.docid)) {
            return Err(FeedbackRejection::DocumentNotShown {
                impression: event.impression_id,
                docid: c.docid.clone(),
            }
            .into());
        }
        let mut fresh = Vec::new();
        let mut batch_keys = HashSet::new();
        for c in &event.clicks {
            let key = (event.impression_id, c.ts, c.docid.clone(), c.element.clone());
            if !inner.click_keys.contains(&key) && batch_keys.insert(key) {
                fresh.push(c.clone());
            }
        }
        let ack = FeedbackAck {
            stored: fresh.len(),
            duplicates: event.clicks.len() - fresh.len(),
        };
        if fresh.is_empty() {
            return Ok(ack);
        }
        let record = LogRecord::Feedback(livelab_core::FeedbackEvent {
            impression_id: event.impression_id,
            clicks: fresh,
        });
        inner.writer.append(&record)?;
        inner.lines.push(record.to_line().trim_end().to_owned());
        inner.click_keys.extend(batch_keys);
        Ok(ack)
    }

    /// Number of records already forwarded.
    pub fn forwarded(&self) -> u64 {
        read_cursor(&self.cursor_path).unwrap_or(0)
    }

    /// Forwards every record not yet forwarded. On sink failure nothing is
    /// marked and the entries stay pending.
    pub fn flush(&self, sink: &dyn FeedbackSink) -> Result<usize, FlushError> {
        let _flushing = self.flush_lock.lock().expect("flush lock");
        let start = read_cursor(&self.cursor_path).unwrap_or(0);
        let pending: Vec<String> = {
            let inner = self.inner.lock().expect("store lock");
            inner.lines[start as usize..].to_vec()
        };
        if pending.is_empty() {
            return Ok(0);
        }
        let batch: Vec<ForwardedEntry> = pending
            .iter()
            .enumerate()
            .map(|(i, line)| ForwardedEntry {
                seq: start + i as u64,
                record: serde_json::from_str(line).expect("stored lines are JSON"),
            })
            .collect();
        sink.deliver(&batch)?;
        write_cursor(&self.cursor_path, start + batch.len() as u64).map_err(|source| FlushError::Cursor {
            path: self.cursor_path.clone(),
            source,
        })?;
        Ok(batch.len())
    }
}

fn cursor_path_for(log: &Path) -> PathBuf {
    let mut name = log.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".forwarded");
    log.with_file_name(name)
}

fn read_cursor(path: &Path) -> Result<u64, FeedbackStoreError> {
    match fs::read_to_string(path) {
        Ok(text) => text.trim().parse().map_err(|e| FeedbackStoreError::Cursor {
            path: path.to_owned(),
            message: format!("{e}"),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(FeedbackStoreError::Cursor {
            path: path.to_owned(),
            message: e.to_string(),
        }),
    }
}

fn write_cursor(path: &Path, value: u64) -> io::Result<()> {
    let tmp = path.with_extension("forwarded.tmp");
    fs::write(&tmp, format!("{value}\n"))?;
    fs::rename(&tmp, path)
}
