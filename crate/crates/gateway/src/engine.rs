//! Request handling independent of transport: session resolution, system
//! rotation, interleaving, impression logging and feedback intake.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use livelab_core::baseline::build_index;
use livelab_core::ingest::{self, parse_head_queries};
use livelab_core::interleave::{team_draft_interleave, SeededCoin};
use livelab_core::metrics::RewardWeights;
use livelab_core::store::{BaselineOnlyRequest, LogRecord, SessionOpened, StoreError};
use livelab_core::{
    ClickEvent, FeedbackEvent, HeadQuery, Impression, ImpressionId, ImpressionIdGenerator, InterleavedList,
    SessionId, SessionStore, SystemDescriptor, SystemKind, Task, Team, Timestamp,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{GatewayConfig, RppLimits};
use crate::feedback::{FeedbackAck, FeedbackStore, FeedbackStoreError};
use crate::systems::{
    Adapter, AdapterError, BaselineSystem, PrecomputedSystem, RemoteContract, RemoteSystem, SystemRequest,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("task {0} is not configured on this gateway")]
    TaskNotConfigured(Task),
    #[error("baseline '{system}' failed: {source}")]
    BaselineFailed {
        system: String,
        #[source]
        source: AdapterError,
    },
    #[error("feedback rejected: {0}")]
    FeedbackRejected(String),
    #[error("feedback store error: {0}")]
    Store(#[from] StoreError),
    #[error("cannot start gateway: {0}")]
    Startup(String),
}

impl From<FeedbackStoreError> for GatewayError {
    fn from(e: FeedbackStoreError) -> Self {
        match e {
            FeedbackStoreError::Rejected(r) => GatewayError::FeedbackRejected(r.to_string()),
            FeedbackStoreError::Store(s) => GatewayError::Store(s),
            other => GatewayError::Startup(other.to_string()),
        }
    }
}

/// Which systems produced a page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub exp: Option<String>,
    pub base: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageHeader {
    pub sid: SessionId,
    pub impression_id: Option<ImpressionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itemid: Option<String>,
    pub page: usize,
    pub rpp: usize,
    pub num_found: usize,
    pub container: Container,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageItem {
    pub docid: String,
    #[serde(rename = "type")]
    pub team: Team,
}

/// Result page as sent to the site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageResponse {
    pub header: PageHeader,
    pub body: Vec<PageItem>,
}

impl PageResponse {
    pub fn is_interleaved(&self) -> bool {
        self.header.impression_id.is_some()
    }
}

/// Feedback as posted by the site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub impression_id: ImpressionId,
    pub clicks: Vec<ClickEvent>,
}

/// Counters of served pages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeCounts {
    pub interleaved: u64,
    pub baseline_only: u64,
    /// Interleaved pages per experimental system.
    pub per_system: BTreeMap<String, u64>,
    /// How often each experimental system was selected, responding or not.
    pub selected: BTreeMap<String, u64>,
}

struct TaskSystems {
    baseline: Adapter,
    experimental: Vec<Adapter>,
}

pub struct Gateway {
    tasks: BTreeMap<Task, TaskSystems>,
    rpp: RppLimits,
    sessions: SessionStore,
    ids: ImpressionIdGenerator,
    rotation: Mutex<ChaCha8Rng>,
    coin_seed: u64,
    store: Arc<FeedbackStore>,
    weights: RewardWeights,
    counts: Mutex<ServeCounts>,
    requests: AtomicU64,
}

/// Builder input: adapters already constructed.
pub struct GatewayParts {
    pub adapters: Vec<Adapter>,
    pub rpp: RppLimits,
    pub session_timeout: std::time::Duration,
    pub rotation_seed: u64,
    pub weights: RewardWeights,
    pub store: Arc<FeedbackStore>,
}

fn mix(seed: u64, value: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed ^ value.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds an adapter for every configured system, loading corpora and runs
/// and asking live systems to index.
pub fn build_adapters(config: &GatewayConfig) -> Result<Vec<Adapter>, GatewayError> {
    let startup = |e: &dyn std::fmt::Display| GatewayError::Startup(e.to_string());
    let head_queries: Vec<HeadQuery> = match &config.corpora.head_queries {
        Some(p) => parse_head_queries(p).map_err(|e| startup(&e))?,
        None => Vec::new(),
    };
    let mut adapters: Vec<Adapter> = Vec::new();
    for entry in &config.systems {
        let d: SystemDescriptor = entry.descriptor();
        let adapter: Adapter = match entry.kind {
            SystemKind::Precomputed => {
                let path = std::path::PathBuf::from(entry.source.clone().unwrap_or_default());
                Arc::new(
                    PrecomputedSystem::load(d, &path, &head_queries)
                        .map_err(|e| GatewayError::Startup(format!("{}: {e}", path.display())))?,
                )
            }
            SystemKind::LiveRemote => {
                let remote = RemoteSystem::new(
                    d,
                    RemoteContract::new(entry.source.clone().unwrap_or_default()),
                    config.remote_timeout,
                    config.remote_max_in_flight,
                );
                if let Err(e) = remote.trigger_index() {
                    tracing::warn!(system = %entry.name, error = %e, "index trigger failed");
                }
                Arc::new(remote)
            }
            SystemKind::BuiltinBaseline => {
                let c = &config.corpora;
                match entry.task {
                    Task::Ranking => {
                        let path = c.documents.as_ref().expect("validated");
                        let schema = c.documents_schema.unwrap_or(ingest::SiteSchema::Literature);
                        let docs = ingest::parse_documents(path, schema)
                            .map_err(|e| GatewayError::Startup(format!("{}: {e}", path.display())))?;
                        let fields: Vec<&str> = c.document_fields.iter().map(String::as_str).collect();
                        let index = build_index(&docs, &fields).map_err(|e| startup(&e))?;
                        Arc::new(BaselineSystem::ranking(d, index))
                    }
                    Task::Recommendation => {
                        let pubs_path = c.publications.as_ref().expect("validated");
                        let data_path = c.datasets.as_ref().expect("validated");
                        let schema = ingest::SiteSchema::SocialScience;
                        let pubs = ingest::parse_documents(pubs_path, schema)
                            .map_err(|e| GatewayError::Startup(format!("{}: {e}", pubs_path.display())))?;
                        let datasets = ingest::parse_documents(data_path, schema)
                            .map_err(|e| GatewayError::Startup(format!("{}: {e}", data_path.display())))?;
                        let fields: Vec<&str> = c.dataset_fields.iter().map(String::as_str).collect();
                        let index = build_index(&datasets, &fields).map_err(|e| startup(&e))?;
                        Arc::new(BaselineSystem::recommendation(d, index, pubs))
                    }
                }
            }
        };
        adapters.push(adapter);
    }
    Ok(adapters)
}

impl Gateway {
    pub fn from_parts(parts: GatewayParts) -> Result<Self, GatewayError> {
        let mut baselines: BTreeMap<Task, Adapter> = BTreeMap::new();
        let mut experimental: BTreeMap<Task, Vec<Adapter>> = BTreeMap::new();
        for adapter in parts.adapters {
            let d = adapter.descriptor().clone();
            if d.is_baseline {
                if baselines.insert(d.task, adapter).is_some() {
                    return Err(GatewayError::Startup(format!(
                        "more than one baseline for task {}",
                        d.task
                    )));
                }
            } else {
                experimental.entry(d.task).or_default().push(adapter);
            }
        }
        let mut tasks = BTreeMap::new();
        if let Some(task) = experimental.keys().find(|t| !baselines.contains_key(t)) {
            return Err(GatewayError::Startup(format!("task {task} has no baseline")));
        }
        for (task, baseline) in baselines {
            tasks.insert(
                task,
                TaskSystems {
                    baseline,
                    experimental: experimental.remove(&task).unwrap_or_default(),
                },
            );
        }
        let recovered = parts.store.recovered();
        let sessions = SessionStore::resume_after(parts.session_timeout, recovered.last_session)
            .map_err(|e| GatewayError::Startup(e.to_string()))?;
        Ok(Self {
            tasks,
            rpp: parts.rpp,
            sessions,
            ids: ImpressionIdGenerator::resume_after(recovered.last_impression),
            rotation: Mutex::new(ChaCha8Rng::seed_from_u64(parts.rotation_seed)),
            coin_seed: mix(parts.rotation_seed, 0x00C0_FFEE),
            store: parts.store,
            weights: parts.weights,
            counts: Mutex::new(ServeCounts::default()),
            requests: AtomicU64::new(0),
        })
    }

    /// Builds every configured system and opens the configured feedback log.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let adapters = build_adapters(config)?;
        let store = Arc::new(FeedbackStore::open(&config.feedback_log)?);
        Self::from_parts(GatewayParts {
            adapters,
            rpp: config.rpp,
            session_timeout: config.session_timeout,
            rotation_seed: config.rotation_seed,
            weights: config.weights.clone(),
            store,
        })
    }

    pub fn store(&self) -> &Arc<FeedbackStore> {
        &self.store
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn counts(&self) -> ServeCounts {
        self.counts.lock().expect("counts lock").clone()
    }

    pub fn requests_served(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn descriptors(&self) -> Vec<SystemDescriptor> {
        self.tasks
            .values()
            .flat_map(|t| std::iter::once(&t.baseline).chain(&t.experimental))
            .map(|a| a.descriptor().clone())
            .collect()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.tasks.keys().copied().collect()
    }

    pub fn handle_ranking(
        &self,
        query: &str,
        site_user: &str,
        page: usize,
        rpp: Option<usize>,
        ts: Timestamp,
    ) -> Result<PageResponse, GatewayError> {
        self.handle(Task::Ranking, query, site_user, page, rpp, ts)
    }

    pub fn handle_recommendation(
        &self,
        item_id: &str,
        site_user: &str,
        page: usize,
        rpp: Option<usize>,
        ts: Timestamp,
    ) -> Result<PageResponse, GatewayError> {
        self.handle(Task::Recommendation, item_id, site_user, page, rpp, ts)
    }

    fn pick_experimental<'a>(&self, systems: &'a [Adapter]) -> Option<&'a Adapter> {
        if systems.is_empty() {
            return None;
        }
        let i = self
            .rotation
            .lock()
            .expect("rotation lock")
            .random_range(0..systems.len());
        Some(&systems[i])
    }

    pub fn handle(
        &self,
        task: Task,
        request: &str,
        site_user: &str,
        page: usize,
        rpp: Option<usize>,
        ts: Timestamp,
    ) -> Result<PageResponse, GatewayError> {
        if request.trim().is_empty() {
            return Err(GatewayError::BadRequest(match task {
                Task::Ranking => "query is empty".into(),
                Task::Recommendation => "item id is empty".into(),
            }));
        }
        let cap = self.rpp.for_task(task);
        let rpp = match rpp {
            Some(0) => return Err(GatewayError::BadRequest("rpp must be at least 1".into())),
            Some(r) => r.min(cap),
            None => cap,
        };
        let systems = self
            .tasks
            .get(&task)
            .ok_or(GatewayError::TaskNotConfigured(task))?;
        self.requests.fetch_add(1, Ordering::SeqCst);

        let session = self.sessions.resolve_session(site_user, ts);
        if session.is_new {
            self.store.append(&LogRecord::Session(SessionOpened {
                session_id: session.session_id,
                site_user: site_user.to_owned(),
                ts,
            }))?;
        }

        let sys_request = SystemRequest {
            task,
            request: request.to_owned(),
            page,
            rpp,
        };
        let chosen = self.pick_experimental(&systems.experimental);
        let base_name = systems.baseline.descriptor().name.clone();
        let base =
            systems
                .baseline
                .try_respond(&sys_request)
                .map_err(|source| GatewayError::BaselineFailed {
                    system: base_name.clone(),
                    source,
                })?;
        let exp = chosen.map(|a| (a.descriptor().name.clone(), a.respond(&sys_request)));
        if let Some((name, _)) = &exp {
            *self
                .counts
                .lock()
                .expect("counts lock")
                .selected
                .entry(name.clone())
                .or_default() += 1;
        }

        let (q, itemid) = match task {
            Task::Ranking => (Some(request.to_owned()), None),
            Task::Recommendation => (None, Some(request.to_owned())),
        };

        match exp {
            Some((exp_name, exp_resp)) if exp_resp.responded => {
                let impression_id = self.ids.new_impression_id();
                let mut coin = SeededCoin::new(mix(self.coin_seed, impression_id.0));
                let entries = team_draft_interleave(&exp_resp.doc_ids(), &base.doc_ids(), rpp, &mut coin);
                let interleaved = InterleavedList {
                    exp_system: exp_name.clone(),
                    base_system: base_name.clone(),
                    entries,
                };
                let body = interleaved
                    .entries
                    .iter()
                    .map(|e| PageItem {
                        docid: e.docid.clone(),
                        team: e.team,
                    })
                    .collect();
                self.store.append(&LogRecord::Impression(Impression {
                    impression_id,
                    session_id: session.session_id,
                    task,
                    request: request.to_owned(),
                    page,
                    rpp,
                    interleaved,
                    ts,
                }))?;
                {
                    let mut counts = self.counts.lock().expect("counts lock");
                    counts.interleaved += 1;
                    *counts.per_system.entry(exp_name.clone()).or_default() += 1;
                }
                Ok(PageResponse {
                    header: PageHeader {
                        sid: session.session_id,
                        impression_id: Some(impression_id),
                        q,
                        itemid,
                        page,
                        rpp,
                        num_found: exp_resp.num_found.max(base.num_found),
                        container: Container {
                            exp: Some(exp_name),
                            base: base_name,
                        },
                    },
                    body,
                })
            }
            _ => {
                self.store.append(&LogRecord::Request(BaselineOnlyRequest {
                    session_id: session.session_id,
                    task,
                    request: request.to_owned(),
                    page,
                    rpp,
                    base_system: base_name.clone(),
                    ts,
                }))?;
                self.counts.lock().expect("counts lock").baseline_only += 1;
                Ok(PageResponse {
                    header: PageHeader {
                        sid: session.session_id,
                        impression_id: None,
                        q,
                        itemid,
                        page,
                        rpp,
                        num_found: base.num_found,
                        container: Container {
                            exp: None,
                            base: base_name,
                        },
                    },
                    body: base
                        .results
                        .iter()
                        .take(rpp)
                        .map(|r| PageItem {
                            docid: r.doc_id.clone(),
                            team: Team::Base,
                        })
                        .collect(),
                })
            }
        }
    }

    /// Stores clicks for an impression. Unknown element labels are mapped to
    /// the default element; redelivered clicks are ignored.
    pub fn handle_feedback(&self, payload: &FeedbackPayload) -> Result<FeedbackAck, GatewayError> {
        let clicks = payload
            .clicks
            .iter()
            .map(|c| ClickEvent {
                docid: c.docid.clone(),
                element: self.weights.canonical_element(&c.element).to_owned(),
                ts: c.ts,
            })
            .collect();
        Ok(self.store.append_feedback(&FeedbackEvent {
            impression_id: payload.impression_id,
            clicks,
        })?)
    }
}
