//! Shared domain vocabulary: documents, queries, result lists, impressions,
//! feedback, sessions and system identity.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch.
pub type Timestamp = i64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("session timeout must be positive")]
    ZeroTimeout,
}

/// A corpus entry. Field names follow the site schema, values are always
/// lists of strings (scalars are wrapped on ingest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub fields: BTreeMap<String, Vec<String>>,
}

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.fields.entry(name.into()).or_default().push(value.into());
        self
    }

    /// All values of `name` joined by a single space, or `None` if absent.
    pub fn field_text(&self, name: &str) -> Option<String> {
        self.fields
            .get(name)
            .filter(|values| !values.is_empty())
            .map(|values| values.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadQuery {
    pub qid: u64,
    pub qstr: String,
    pub freq: u64,
}

/// Key of a candidate list: a head-query id for ranking, a seed document for
/// recommendation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidateKey {
    Qid(u64),
    Item(String),
}

impl fmt::Display for CandidateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateKey::Qid(qid) => write!(f, "{qid}"),
            CandidateKey::Item(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub key: CandidateKey,
    /// Query string carried alongside ranking candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qstr: Option<String>,
    pub candidates: Vec<Candidate>,
}

impl CandidateList {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.doc_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub doc_id: String,
    /// 1-based.
    pub rank: usize,
    pub score: f64,
}

/// Which side of an interleaving contributed a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Team {
    #[serde(rename = "EXP")]
    Exp,
    #[serde(rename = "BASE")]
    Base,
}

impl Team {
    pub fn other(self) -> Team {
        match self {
            Team::Exp => Team::Base,
            Team::Base => Team::Exp,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Team::Exp => "EXP",
            Team::Base => "BASE",
        }
    }
}

impl fmt::Display for Team {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedEntry {
    pub docid: String,
    #[serde(rename = "type")]
    pub team: Team,
}

/// A team-labelled result page produced by interleaving an experimental and a
/// baseline list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedList {
    pub exp_system: String,
    pub base_system: String,
    pub entries: Vec<InterleavedEntry>,
}

impl InterleavedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn team_of(&self, doc_id: &str) -> Option<Team> {
        self.entries.iter().find(|e| e.docid == doc_id).map(|e| e.team)
    }

    /// 1-based position of `doc_id`.
    pub fn position_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.docid == doc_id).map(|i| i + 1)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.entries.iter().any(|e| e.docid == doc_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ranking,
    Recommendation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ranking => "ranking",
            Task::Recommendation => "recommendation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ranking" => Ok(Task::Ranking),
            "recommendation" => Ok(Task::Recommendation),
            other => Err(format!(
                "unknown task '{other}' (expected ranking or recommendation)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpressionId(pub u64);

impl fmt::Display for ImpressionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One delivered interleaved result page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub impression_id: ImpressionId,
    pub session_id: SessionId,
    pub task: Task,
    /// Query string for ranking, seed document id for recommendation.
    pub request: String,
    pub page: usize,
    pub rpp: usize,
    pub interleaved: InterleavedList,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickEvent {
    pub docid: String,
    pub element: String,
    pub ts: Timestamp,
}

impl ClickEvent {
    pub fn new(docid: impl Into<String>, element: impl Into<String>, ts: Timestamp) -> Self {
        Self {
            docid: docid.into(),
            element: element.into(),
            ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub impression_id: ImpressionId,
    pub clicks: Vec<ClickEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub site_user: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub impression_ids: Vec<ImpressionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Type A: a submitted run file restricted to head queries or seed items.
    Precomputed,
    /// Type B: a live system speaking the participant HTTP contract.
    LiveRemote,
    BuiltinBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemDescriptor {
    pub name: String,
    pub kind: SystemKind,
    pub task: Task,
    #[serde(default)]
    pub is_baseline: bool,
    /// Run-file path for precomputed systems, base URL for remote ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Hands out impression ids that never repeat within a process.
#[derive(Debug)]
pub struct ImpressionIdGenerator {
    next: AtomicU64,
}

impl Default for ImpressionIdGenerator {
    fn default() -> Self {
        Self::new()
    }
}

impl ImpressionIdGenerator {
    pub fn new() -> Self {
        Self {
            next: AtomicU64::new(1),
        }
    }

    /// Continue after ids already present in a persisted log.
    pub fn resume_after(last: Option<ImpressionId>) -> Self {
        let next = last.map_or(1, |id| id.0 + 1);
        Self {
            next: AtomicU64::new(next),
        }
    }

    pub fn new_impression_id(&self) -> ImpressionId {
        ImpressionId(self.next.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionResolution {
    pub session_id: SessionId,
    /// True when this call opened the session.
    pub is_new: bool,
}

#[derive(Debug, Clone, Copy)]
struct OpenSession {
    id: SessionId,
    last_activity: Timestamp,
}

/// Per-user session tracking with an inactivity timeout.
#[derive(Debug)]
pub struct SessionStore {
    timeout_ms: i64,
    open: Mutex<HashMap<String, OpenSession>>,
    next_id: AtomicU64,
}

impl SessionStore {
    pub fn new(timeout: Duration) -> Result<Self, ModelError> {
        Self::resume_after(timeout, None)
    }

    pub fn resume_after(timeout: Duration, last: Option<SessionId>) -> Result<Self, ModelError> {
        if timeout.is_zero() {
            return Err(ModelError::ZeroTimeout);
        }
        Ok(Self {
            timeout_ms: i64::try_from(timeout.as_millis()).unwrap_or(i64::MAX),
            open: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(last.map_or(1, |id| id.0 + 1)),
        })
    }

    /// Returns the user's open session if its last activity lies within the
    /// timeout, otherwise opens a new one. Either way the activity time moves
    /// forward to `ts`.
    pub fn resolve_session(&self, site_user: &str, ts: Timestamp) -> SessionResolution {
        let mut open = self.open.lock().expect("session store poisoned");
        if let Some(session) = open.get_mut(site_user) {
            if ts - session.last_activity <= self.timeout_ms {
                session.last_activity = session.last_activity.max(ts);
                return SessionResolution {
                    session_id: session.id,
                    is_new: false,
                };
            }
        }
        let id = SessionId(self.next_id.fetch_add(1, Ordering::Relaxed));
        open.insert(
            site_user.to_owned(),
            OpenSession {
                id,
                last_activity: ts,
            },
        );
        SessionResolution {
            session_id: id,
            is_new: true,
        }
    }
}
