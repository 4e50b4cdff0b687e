//! Parsers and writers for the on-disk formats: JSONL corpora, head queries
//! and candidate lists for both sites, and six-column TREC run files.
//!
//! Every parser is total over its input: each line yields either a record or
//! a positioned error. Parsers report all line errors at once instead of
//! stopping at the first one. Blank lines are errors, a trailing newline is
//! not a line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{Candidate, CandidateKey, CandidateList, DocumentRecord, HeadQuery, Task};

/// A message pinned to a 1-based input line. Line 0 refers to the file as a
/// whole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineMessage {
    pub line: usize,
    pub message: String,
}

impl LineMessage {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for LineMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invalid line(s); first: {}", .0.len(), .0[0])]
    Lines(Vec<LineMessage>),
}

impl IngestError {
    pub fn line_errors(&self) -> &[LineMessage] {
        match self {
            IngestError::Lines(errors) => errors,
            IngestError::Io { .. } => &[],
        }
    }
}

fn read(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Field layout of a site's document corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSchema {
    /// Life-sciences literature: `DBRECORDID`, `TITLE`, `AUTHOR`, ...
    Literature,
    /// Social-science publications and research datasets: `id`, `title`,
    /// `abstract`, `topic` and their `_en` variants.
    SocialScience,
}

impl SiteSchema {
    pub fn id_field(self) -> &'static str {
        match self {
            SiteSchema::Literature => "DBRECORDID",
            SiteSchema::SocialScience => "id",
        }
    }
}

impl FromStr for SiteSchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literature" => Ok(SiteSchema::Literature),
            "social_science" => Ok(SiteSchema::SocialScience),
            other => Err(format!(
                "unknown schema '{other}' (expected literature or social_science)"
            )),
        }
    }
}

/// Splits text into numbered lines, rejecting blank ones.
fn json_lines(text: &str) -> impl Iterator<Item = (usize, Result<Map<String, Value>, String>)> + '_ {
    text.lines().enumerate().map(|(i, line)| {
        let parsed = if line.trim().is_empty() {
            Err("empty line".to_owned())
        } else {
            match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(map)) => Ok(map),
                Ok(_) => Err("expected a JSON object".to_owned()),
                Err(e) => Err(format!("malformed JSON: {e}")),
            }
        };
        (i + 1, parsed)
    })
}

fn finish<T>(items: T, errors: Vec<LineMessage>) -> Result<T, IngestError> {
    if errors.is_empty() {
        Ok(items)
    } else {
        Err(IngestError::Lines(errors))
    }
}

fn field_values(name: &str, value: &Value) -> Result<Vec<String>, String> {
    fn scalar(v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }
    match value {
        Value::Null => Ok(Vec::new()),
        Value::Array(items) => items
            .iter()
            .map(|v| scalar(v).ok_or_else(|| format!("field '{name}' holds a nested value")))
            .collect(),
        other => scalar(other)
            .map(|s| vec![s])
            .ok_or_else(|| format!("field '{name}' holds a nested object")),
    }
}

fn document_from_object(
    mut object: Map<String, Value>,
    schema: SiteSchema,
) -> Result<DocumentRecord, String> {
    let id_field = schema.id_field();
    let doc_id = match object.remove(id_field) {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(Value::String(_)) => return Err(format!("empty '{id_field}'")),
        Some(_) => return Err(format!("'{id_field}' must be a string")),
        None => return Err(format!("missing '{id_field}'")),
    };
    let mut fields = BTreeMap::new();
    for (name, value) in object {
        if name.is_empty() {
            return Err("empty field name".to_owned());
        }
        let values = field_values(&name, &value)?;
        fields.insert(name, values);
    }
    Ok(DocumentRecord { doc_id, fields })
}

pub fn parse_documents_str(text: &str, schema: SiteSchema) -> Result<Vec<DocumentRecord>, IngestError> {
    let mut docs = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, parsed) in json_lines(text) {
        match parsed.and_then(|obj| document_from_object(obj, schema)) {
            Ok(doc) => {
                if let Some(first) = seen.get(&doc.doc_id) {
                    errors.push(LineMessage::new(
                        line,
                        format!("duplicate document id '{}' (first at line {first})", doc.doc_id),
                    ));
                } else {
                    seen.insert(doc.doc_id.clone(), line);
                    docs.push(doc);
                }
            }
            Err(message) => errors.push(LineMessage::new(line, message)),
        }
    }
    finish(docs, errors)
}

pub fn parse_documents(path: &Path, schema: SiteSchema) -> Result<Vec<DocumentRecord>, IngestError> {
    parse_documents_str(&read(path)?, schema)
}

fn required_u64(object: &Map<String, Value>, key: &str) -> Result<u64, String> {
    match object.get(key) {
        None => Err(format!("missing '{key}'")),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| format!("'{key}' must be a non-negative integer")),
    }
}

fn required_str<'a>(object: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match object.get(key) {
        None => Err(format!("missing '{key}'")),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s),
        Some(Value::String(_)) => Err(format!("'{key}' is empty")),
        Some(_) => Err(format!("'{key}' must be a string")),
    }
}

pub fn parse_head_queries_str(text: &str) -> Result<Vec<HeadQuery>, IngestError> {
    let mut queries = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for (line, parsed) in json_lines(text) {
        let query = parsed.and_then(|obj| {
            Ok(HeadQuery {
                qid: required_u64(&obj, "qid")?,
                qstr: required_str(&obj, "qstr")?.to_owned(),
                freq: required_u64(&obj, "freq")?,
            })
        });
        match query {
            Ok(q) => {
                if let Some(first) = seen.get(&q.qid) {
                    errors.push(LineMessage::new(
                        line,
                        format!("duplicate qid {} (first at line {first})", q.qid),
                    ));
                } else {
                    seen.insert(q.qid, line);
                    queries.push(q);
                }
            }
            Err(message) => errors.push(LineMessage::new(line, message)),
        }
    }
    finish(queries, errors)
}

pub fn parse_head_queries(path: &Path) -> Result<Vec<HeadQuery>, IngestError> {
    parse_head_queries_str(&read(path)?)
}

fn ranking_candidates(obj: &Map<String, Value>) -> Result<CandidateList, String> {
    let qid = required_u64(obj, "qid")?;
    let qstr = match obj.get("qstr") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("'qstr' must be a string".to_owned()),
    };
    let items = match obj.get("candidates") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err("'candidates' must be an array".to_owned()),
        None => return Err("missing 'candidates'".to_owned()),
    };
    let candidates = items
        .iter()
        .map(|v| match v {
            Value::String(s) if !s.is_empty() => Ok(Candidate {
                doc_id: s.clone(),
                score: None,
            }),
            _ => Err("candidate ids must be non-empty strings".to_owned()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CandidateList {
        key: CandidateKey::Qid(qid),
        qstr,
        candidates,
    })
}

fn recommendation_candidates(obj: &Map<String, Value>) -> Result<CandidateList, String> {
    let seed = required_str(obj, "s_id")?.to_owned();
    let scores = match obj.get("candidate_docs") {
        Some(Value::Object(map)) => map,
        Some(_) => return Err("'candidate_docs' must be an object".to_owned()),
        None => return Err("missing 'candidate_docs'".to_owned()),
    };
    let mut candidates = Vec::with_capacity(scores.len());
    for (doc_id, score) in scores {
        let score = score
            .as_f64()
            .filter(|s| s.is_finite())
            .ok_or_else(|| format!("score of '{doc_id}' must be a finite number"))?;
        if doc_id.is_empty() {
            return Err("candidate ids must be non-empty strings".to_owned());
        }
        candidates.push(Candidate {
            doc_id: doc_id.clone(),
            score: Some(score),
        });
    }
    sort_by_score(&mut candidates);
    Ok(CandidateList {
        key: CandidateKey::Item(seed),
        qstr: None,
        candidates,
    })
}

/// Descending score, ascending doc id on ties.
pub fn sort_by_score(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
        sb.total_cmp(&sa).then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

pub fn parse_candidates_str(
    text: &str,
    task: Task,
) -> Result<BTreeMap<CandidateKey, CandidateList>, IngestError> {
    let mut lists = BTreeMap::new();
    let mut first_line: HashMap<CandidateKey, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (line, parsed) in json_lines(text) {
        let list = parsed.and_then(|obj| {
            let list = match task {
                Task::Ranking => ranking_candidates(&obj)?,
                Task::Recommendation => recommendation_candidates(&obj)?,
            };
            if list.candidates.is_empty() {
                return Err("empty candidate list".to_owned());
            }
            let mut seen = HashSet::new();
            if let Some(dup) = list.doc_ids().find(|id| !seen.insert(*id)) {
                return Err(format!("duplicate candidate '{dup}'"));
            }
            Ok(list)
        });
        match list {
            Ok(list) => {
                if let Some(first) = first_line.get(&list.key) {
                    errors.push(LineMessage::new(
                        line,
                        format!("duplicate key '{}' (first at line {first})", list.key),
                    ));
                } else {
                    first_line.insert(list.key.clone(), line);
                    lists.insert(list.key.clone(), list);
                }
            }
            Err(message) => errors.push(LineMessage::new(line, message)),
        }
    }
    finish(lists, errors)
}

pub fn parse_candidates(
    path: &Path,
    task: Task,
) -> Result<BTreeMap<CandidateKey, CandidateList>, IngestError> {
    parse_candidates_str(&read(path)?, task)
}

/// Serializes candidate lists back to the JSONL layout their task uses.
pub fn write_candidates<'a>(lists: impl IntoIterator<Item = &'a CandidateList>, task: Task) -> String {
    let mut out = String::new();
    for list in lists {
        let value = match task {
            Task::Ranking => {
                let mut obj = Map::new();
                match &list.key {
                    CandidateKey::Qid(qid) => obj.insert("qid".into(), Value::from(*qid)),
                    CandidateKey::Item(id) => obj.insert("qid".into(), Value::from(id.as_str())),
                };
                if let Some(qstr) = &list.qstr {
                    obj.insert("qstr".into(), Value::from(qstr.as_str()));
                }
                obj.insert(
                    "candidates".into(),
                    list.doc_ids().map(Value::from).collect::<Vec<_>>().into(),
                );
                obj
            }
            Task::Recommendation => {
                let mut obj = Map::new();
                obj.insert("s_id".into(), Value::from(list.key.to_string()));
                let docs: Map<String, Value> = list
                    .candidates
                    .iter()
                    .map(|c| (c.doc_id.clone(), Value::from(c.score.unwrap_or(0.0))))
                    .collect();
                obj.insert("candidate_docs".into(), Value::Object(docs));
                obj
            }
        };
        out.push_str(&Value::Object(value).to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// A pre-computed submission: per query id, entries ordered by rank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunFile {
    pub tag: String,
    pub entries: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    /// Builds a run from candidate lists, keeping list order. Missing scores
    /// become descending integers so the score column stays monotone.
    pub fn from_candidates<'a>(
        tag: impl Into<String>,
        lists: impl IntoIterator<Item = &'a CandidateList>,
    ) -> Self {
        let entries = lists
            .into_iter()
            .map(|list| {
                let n = list.candidates.len();
                let ranked = list
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| RunEntry {
                        doc_id: c.doc_id.clone(),
                        rank: i + 1,
                        score: c.score.unwrap_or((n - i) as f64),
                    })
                    .collect();
                (list.key.to_string(), ranked)
            })
            .collect();
        RunFile {
            tag: tag.into(),
            entries,
        }
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Six-column text, one line per entry.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, entries) in &self.entries {
            for e in entries {
                out.push_str(&format!(
                    "{qid} Q0 {} {} {} {}\n",
                    e.doc_id, e.rank, e.score, self.tag
                ));
            }
        }
        out
    }
}

/// Outcome of checking a run file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub line_errors: Vec<LineMessage>,
    pub warnings: Vec<LineMessage>,
}

struct Checked {
    run: RunFile,
    /// First line each qid appeared on.
    qid_lines: BTreeMap<String, usize>,
    /// First line each doc id appeared on.
    doc_lines: BTreeMap<String, usize>,
    errors: Vec<LineMessage>,
    warnings: Vec<LineMessage>,
}

fn check_run(text: &str) -> Checked {
    struct Pending {
        rank: usize,
        line: usize,
        entry: RunEntry,
    }

    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut tag: Option<(String, usize)> = None;
    let mut per_qid: BTreeMap<String, Vec<Pending>> = BTreeMap::new();
    let mut docs_seen: HashMap<(String, String), usize> = HashMap::new();
    let mut ranks_seen: HashMap<(String, usize), usize> = HashMap::new();
    let mut qid_lines = BTreeMap::new();
    let mut doc_lines = BTreeMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let cols: Vec<&str> = raw.split_whitespace().collect();
        if cols.is_empty() {
            errors.push(LineMessage::new(line, "empty line"));
            continue;
        }
        if cols.len() != 6 {
            errors.push(LineMessage::new(
                line,
                format!("expected 6 columns, found {}", cols.len()),
            ));
            continue;
        }
        let (qid, q0, doc, rank, score, run_tag) = (cols[0], cols[1], cols[2], cols[3], cols[4], cols[5]);
        if q0 != "Q0" {
            errors.push(LineMessage::new(
                line,
                format!("second column must be the literal Q0, found '{q0}'"),
            ));
            continue;
        }
        let rank = match rank.parse::<usize>() {
            Ok(0) => {
                errors.push(LineMessage::new(line, "rank must be at least 1"));
                continue;
            }
            Ok(r) => r,
            Err(_) => {
                errors.push(LineMessage::new(
                    line,
                    format!("rank '{rank}' is not a positive integer"),
                ));
                continue;
            }
        };
        let score = match score.parse::<f64>() {
            Ok(s) if s.is_finite() => s,
            Ok(_) => {
                errors.push(LineMessage::new(line, format!("score '{score}' is not finite")));
                continue;
            }
            Err(_) => {
                errors.push(LineMessage::new(line, format!("score '{score}' is not a number")));
                continue;
            }
        };
        match &tag {
            None => tag = Some((run_tag.to_owned(), line)),
            Some((first, first_line)) if first != run_tag => {
                errors.push(LineMessage::new(
                    line,
                    format!("run tag '{run_tag}' differs from '{first}' (line {first_line})"),
                ));
                continue;
            }
            Some(_) => {}
        }
        if let Some(first) = docs_seen.get(&(qid.to_owned(), doc.to_owned())) {
            errors.push(LineMessage::new(
                line,
                format!("duplicate document '{doc}' for query '{qid}' (first at line {first})"),
            ));
            continue;
        }
        if let Some(first) = ranks_seen.get(&(qid.to_owned(), rank)) {
            errors.push(LineMessage::new(
                line,
                format!("duplicate rank {rank} for query '{qid}' (first at line {first})"),
            ));
            continue;
        }
        docs_seen.insert((qid.to_owned(), doc.to_owned()), line);
        ranks_seen.insert((qid.to_owned(), rank), line);
        qid_lines.entry(qid.to_owned()).or_insert(line);
        doc_lines.entry(doc.to_owned()).or_insert(line);
        per_qid.entry(qid.to_owned()).or_default().push(Pending {
            rank,
            line,
            entry: RunEntry {
                doc_id: doc.to_owned(),
                rank,
                score,
            },
        });
    }

    let mut entries = BTreeMap::new();
    for (qid, mut pending) in per_qid {
        pending.sort_by_key(|p| p.rank);
        if let Some((expected, p)) = pending
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1, p))
            .find(|(expected, p)| p.rank != *expected)
        {
            errors.push(LineMessage::new(
                p.line,
                format!(
                    "rank gap for query '{qid}': expected rank {expected}, found {}",
                    p.rank
                ),
            ));
        }
        for pair in pending.windows(2) {
            if pair[1].entry.score > pair[0].entry.score {
                warnings.push(LineMessage::new(
                    pair[1].line,
                    format!(
                        "score increases from rank {} to rank {} for query '{qid}'",
                        pair[0].rank, pair[1].rank
                    ),
                ));
            }
        }
        entries.insert(qid, pending.into_iter().map(|p| p.entry).collect());
    }
    if text.lines().next().is_none() {
        warnings.push(LineMessage::new(0, "no entries"));
    }
    errors.sort_by_key(|m| m.line);
    warnings.sort_by_key(|m| m.line);

    Checked {
        run: RunFile {
            tag: tag.map(|(t, _)| t).unwrap_or_default(),
            entries,
        },
        qid_lines,
        doc_lines,
        errors,
        warnings,
    }
}

pub fn parse_run_str(text: &str) -> Result<RunFile, IngestError> {
    let checked = check_run(text);
    finish(checked.run, checked.errors)
}

pub fn parse_run_file(path: &Path) -> Result<RunFile, IngestError> {
    parse_run_str(&read(path)?)
}

/// Collects every syntax error in a run, plus warnings for query ids outside
/// `known_qids` and, when given, document ids outside `known_doc_ids`.
pub fn validate_run_str(
    text: &str,
    known_qids: Option<&HashSet<String>>,
    known_doc_ids: Option<&HashSet<String>>,
) -> ValidationReport {
    let checked = check_run(text);
    let mut warnings = checked.warnings;
    if let Some(known) = known_qids {
        for (qid, line) in &checked.qid_lines {
            if !known.contains(qid) {
                warnings.push(LineMessage::new(*line, format!("unknown query id '{qid}'")));
            }
        }
    }
    if let Some(known) = known_doc_ids {
        for (doc, line) in &checked.doc_lines {
            if !known.contains(doc) {
                warnings.push(LineMessage::new(*line, format!("unknown document id '{doc}'")));
            }
        }
    }
    warnings.sort_by_key(|m| m.line);
    ValidationReport {
        ok: checked.errors.is_empty(),
        line_errors: checked.errors,
        warnings,
    }
}

pub fn validate_run_file(
    path: &Path,
    known_qids: Option<&HashSet<String>>,
    known_doc_ids: Option<&HashSet<String>>,
) -> Result<ValidationReport, IngestError> {
    Ok(validate_run_str(&read(path)?, known_qids, known_doc_ids))
}
