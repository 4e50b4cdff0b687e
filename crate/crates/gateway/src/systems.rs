//! One adapter interface over pre-computed runs, live remote systems and the
//! built-in baselines.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use livelab_core::baseline::{bm25_rank, publication_title, Bm25Params, InvertedIndex};
use livelab_core::ingest::{self, RunFile};
use livelab_core::{DocumentRecord, HeadQuery, RankedResult, SystemDescriptor, Task};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemRequest {
    pub task: Task,
    /// Query string (ranking) or seed item id (recommendation).
    pub request: String,
    pub page: usize,
    pub rpp: usize,
}

impl SystemRequest {
    pub fn ranking(query: impl Into<String>, page: usize, rpp: usize) -> Self {
        Self {
            task: Task::Ranking,
            request: query.into(),
            page,
            rpp,
        }
    }

    pub fn recommendation(item: impl Into<String>, page: usize, rpp: usize) -> Self {
        Self {
            task: Task::Recommendation,
            request: item.into(),
            page,
            rpp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    pub results: Vec<RankedResult>,
    pub num_found: usize,
    pub responded: bool,
}

impl SystemResponse {
    pub fn no_response() -> Self {
        Self {
            results: Vec::new(),
            num_found: 0,
            responded: false,
        }
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.results.iter().map(|r| r.doc_id.as_str()).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdapterError {
    #[error("request timed out")]
    Timeout,
    #[error("unexpected status {0}")]
    Status(u16),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("system unavailable: {0}")]
    Unavailable(String),
}

/// Anything that can answer ranking or recommendation requests.
pub trait SystemAdapter: Send + Sync {
    fn descriptor(&self) -> &SystemDescriptor;

    /// `Ok` with `responded = false` means the system has nothing for this
    /// request; `Err` means it failed.
    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError>;

    /// Like [`try_respond`](Self::try_respond) but folds failures into a
    /// non-response, logging them.
    fn respond(&self, request: &SystemRequest) -> SystemResponse {
        match self.try_respond(request) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(system = %self.descriptor().name, error = %e, "no response");
                SystemResponse::no_response()
            }
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

fn page_bounds(page: usize, rpp: usize) -> (usize, usize) {
    let start = page.saturating_mul(rpp);
    (start, start.saturating_add(rpp))
}

/// Slices a full ranking to one page; ranks stay absolute.
fn page_of(full: &[RankedResult], page: usize, rpp: usize) -> Vec<RankedResult> {
    let (start, end) = page_bounds(page, rpp);
    full.iter().skip(start).take(end - start).cloned().collect()
}

/// A pre-computed run answering only requests it holds entries for.
pub struct PrecomputedSystem {
    descriptor: SystemDescriptor,
    /// Normalized request -> run query id.
    lookup: HashMap<String, String>,
    run: RunFile,
}

impl PrecomputedSystem {
    /// Ranking runs map query strings through the head queries; for
    /// recommendations the run's query ids are the seed item ids.
    pub fn new(descriptor: SystemDescriptor, run: RunFile, head_queries: &[HeadQuery]) -> Self {
        let lookup = match descriptor.task {
            Task::Ranking => head_queries
                .iter()
                .map(|q| (normalize(&q.qstr), q.qid.to_string()))
                .collect(),
            Task::Recommendation => run.entries.keys().map(|k| (normalize(k), k.clone())).collect(),
        };
        Self {
            descriptor,
            lookup,
            run,
        }
    }

    /// Loads a TREC run, or a candidate file when the source ends in `.jsonl`.
    pub fn load(
        descriptor: SystemDescriptor,
        path: &Path,
        head_queries: &[HeadQuery],
    ) -> Result<Self, ingest::IngestError> {
        let run = if path.extension().is_some_and(|e| e == "jsonl") {
            let lists = ingest::parse_candidates(path, descriptor.task)?;
            RunFile::from_candidates(descriptor.name.clone(), lists.values())
        } else {
            ingest::parse_run_file(path)?
        };
        Ok(Self::new(descriptor, run, head_queries))
    }

    pub fn run(&self) -> &RunFile {
        &self.run
    }
}

impl SystemAdapter for PrecomputedSystem {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.descriptor
    }

    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        let Some(entries) = self
            .lookup
            .get(&normalize(&request.request))
            .and_then(|qid| self.run.entries.get(qid))
        else {
            return Ok(SystemResponse::no_response());
        };
        let (start, end) = page_bounds(request.page, request.rpp);
        let results = entries
            .iter()
            .skip(start)
            .take(end - start)
            .map(|e| RankedResult {
                doc_id: e.doc_id.clone(),
                rank: e.rank,
                score: e.score,
            })
            .collect();
        Ok(SystemResponse {
            results,
            num_found: entries.len(),
            responded: true,
        })
    }
}

/// BM25 over the ranking corpus, or over datasets queried by the seed
/// publication's title.
pub struct BaselineSystem {
    descriptor: SystemDescriptor,
    index: InvertedIndex,
    /// Seed publications by id (recommendation only).
    publications: HashMap<String, DocumentRecord>,
    params: Bm25Params,
    /// Upper bound on retrieved results before paging.
    depth: usize,
}

impl BaselineSystem {
    pub fn ranking(descriptor: SystemDescriptor, index: InvertedIndex) -> Self {
        Self {
            descriptor,
            index,
            publications: HashMap::new(),
            params: Bm25Params::default(),
            depth: 1000,
        }
    }

    pub fn recommendation(
        descriptor: SystemDescriptor,
        dataset_index: InvertedIndex,
        publications: Vec<DocumentRecord>,
    ) -> Self {
        Self {
            descriptor,
            index: dataset_index,
            publications: publications.into_iter().map(|p| (p.doc_id.clone(), p)).collect(),
            params: Bm25Params::default(),
            depth: 1000,
        }
    }

    fn full_ranking(&self, request: &SystemRequest) -> Vec<RankedResult> {
        let query = match request.task {
            Task::Ranking => Some(request.request.clone()),
            Task::Recommendation => self
                .publications
                .get(request.request.trim())
                .and_then(publication_title),
        };
        match query {
            Some(q) => bm25_rank(&self.index, &q, self.depth, self.params).unwrap_or_default(),
            None => Vec::new(),
        }
    }
}

impl SystemAdapter for BaselineSystem {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.descriptor
    }

    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        let full = self.full_ranking(request);
        Ok(SystemResponse {
            results: page_of(&full, request.page, request.rpp),
            num_found: full.len(),
            responded: true,
        })
    }
}

/// Response body a participant system returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantResponse {
    pub header: ParticipantHeader,
    pub body: Vec<ParticipantItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itemid: Option<String>,
    pub page: usize,
    pub rpp: usize,
    pub num_found: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantItem {
    pub docid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Endpoint paths of the participant contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteContract {
    pub base_url: String,
    pub index_path: String,
    pub ranking_path: String,
    pub recommendation_path: String,
}

impl RemoteContract {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            index_path: "/index".into(),
            ranking_path: "/ranking".into(),
            recommendation_path: "/recommendation".into(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }
}

/// A live participant system behind the HTTP contract.
pub struct RemoteSystem {
    descriptor: SystemDescriptor,
    contract: RemoteContract,
    agent: ureq::Agent,
    in_flight: AtomicUsize,
    max_in_flight: usize,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl RemoteSystem {
    pub fn new(
        descriptor: SystemDescriptor,
        contract: RemoteContract,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            descriptor,
            contract,
            agent: config.into(),
            in_flight: AtomicUsize::new(0),
            max_in_flight: max_in_flight.max(1),
        }
    }

    fn acquire(&self) -> Option<InFlight<'_>> {
        let previous = self.in_flight.fetch_add(1, Ordering::SeqCst);
        let guard = InFlight(&self.in_flight);
        (previous < self.max_in_flight).then_some(guard)
    }

    /// Asks the system to (re)build its index; true when it reports ready.
    pub fn trigger_index(&self) -> Result<bool, AdapterError> {
        let mut resp = self
            .agent
            .get(self.contract.url(&self.contract.index_path))
            .call()
            .map_err(map_transport)?;
        if !resp.status().is_success() {
            return Err(AdapterError::Status(resp.status().as_u16()));
        }
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AdapterError::Protocol(e.to_string()))?;
        Ok(value
            .get("ready")
            .and_then(serde_json::Value::as_bool)
            .unwrap_or(true))
    }
}

fn map_transport(e: ureq::Error) -> AdapterError {
    match e {
        ureq::Error::Timeout(_) => AdapterError::Timeout,
        ureq::Error::StatusCode(code) => AdapterError::Status(code),
        other => AdapterError::Unavailable(other.to_string()),
    }
}

/// Checks a participant body and turns it into ranked results.
pub fn parse_participant_body(
    text: &str,
    page: usize,
    rpp: usize,
) -> Result<(Vec<RankedResult>, usize), AdapterError> {
    let parsed: ParticipantResponse =
        serde_json::from_str(text).map_err(|e| AdapterError::Protocol(format!("malformed body: {e}")))?;
    let mut seen = HashSet::new();
    if let Some(dup) = parsed.body.iter().find(|i| !seen.insert(i.docid.as_str())) {
        return Err(AdapterError::Protocol(format!("duplicate docid '{}'", dup.docid)));
    }
    if let Some(bad) = parsed.body.iter().find(|i| i.docid.is_empty()) {
        return Err(AdapterError::Protocol(format!("empty docid in {bad:?}")));
    }
    let first = page * rpp;
    let n = parsed.body.len();
    let results = parsed
        .body
        .into_iter()
        .take(rpp)
        .enumerate()
        .map(|(i, item)| RankedResult {
            doc_id: item.docid,
            rank: first + i + 1,
            score: item.score.filter(|s| s.is_finite()).unwrap_or((n - i) as f64),
        })
        .collect();
    Ok((results, parsed.header.num_found))
}

impl SystemAdapter for RemoteSystem {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.descriptor
    }

    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        let Some(_slot) = self.acquire() else {
            return Err(AdapterError::Unavailable("too many requests in flight".into()));
        };
        let (path, key) = match request.task {
            Task::Ranking => (&self.contract.ranking_path, "query"),
            Task::Recommendation => (&self.contract.recommendation_path, "itemid"),
        };
        let mut resp = self
            .agent
            .get(self.contract.url(path))
            .query(key, &request.request)
            .query("page", request.page.to_string())
            .query("rpp", request.rpp.to_string())
            .call()
            .map_err(map_transport)?;
        if !resp.status().is_success() {
            return Err(AdapterError::Status(resp.status().as_u16()));
        }
        // 204 means the system has nothing for this request.
        if resp.status().as_u16() == 204 {
            return Ok(SystemResponse::no_response());
        }
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        let (results, num_found) = parse_participant_body(&text, request.page, request.rpp)?;
        Ok(SystemResponse {
            results,
            num_found,
            responded: true,
        })
    }
}

/// Shared handle to any adapter.
pub type Adapter = Arc<dyn SystemAdapter>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub request: String,
    pub passed: bool,
    pub responded: bool,
    pub results: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub system: String,
    pub passed: bool,
    pub probes: Vec<ProbeVerdict>,
    pub warnings: Vec<String>,
}

/// Problems with a response's shape: duplicate ids and rank gaps.
pub fn response_problems(response: &SystemResponse) -> Vec<String> {
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for r in &response.results {
        if !seen.insert(r.doc_id.as_str()) {
            problems.push(format!("duplicate id '{}'", r.doc_id));
        }
        if !r.score.is_finite() {
            problems.push(format!("non-finite score for '{}'", r.doc_id));
        }
    }
    for pair in response.results.windows(2) {
        if pair[1].rank != pair[0].rank + 1 {
            problems.push(format!(
                "rank gap: rank {} followed by rank {}",
                pair[0].rank, pair[1].rank
            ));
        }
    }
    if !response.responded && !response.results.is_empty() {
        problems.push("results returned without responding".into());
    }
    problems
}

/// Runs every probe through the adapter. Fails on errors other than an empty
/// answer, duplicate ids or rank gaps.
pub fn sanity_check(adapter: &dyn SystemAdapter, probes: &[SystemRequest]) -> SanityReport {
    let mut verdicts = Vec::with_capacity(probes.len());
    for probe in probes {
        let verdict = match adapter.try_respond(probe) {
            Ok(response) => {
                let problems = response_problems(&response);
                ProbeVerdict {
                    request: probe.request.clone(),
                    passed: problems.is_empty(),
                    responded: response.responded,
                    results: response.results.len(),
                    problems,
                }
            }
            Err(e) => ProbeVerdict {
                request: probe.request.clone(),
                passed: false,
                responded: false,
                results: 0,
                problems: vec![e.to_string()],
            },
        };
        verdicts.push(verdict);
    }
    let mut warnings = Vec::new();
    if probes.is_empty() {
        warnings.push("no probes given".to_owned());
    } else if verdicts.iter().all(|v| !v.responded) && verdicts.iter().all(|v| v.passed) {
        warnings.push("no responses observed".to_owned());
    }
    SanityReport {
        system: adapter.descriptor().name.clone(),
        passed: !probes.is_empty() && verdicts.iter().all(|v| v.passed),
        probes: verdicts,
        warnings,
    }
}
