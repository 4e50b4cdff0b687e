//! The hidden ground truth of a simulation: for every request an oracle
//! ranking whose top `relevant` documents count as relevant, plus systems
//! whose quality is set by their distance from that oracle.

use std::collections::{BTreeMap, HashSet};

use livelab_core::{RankedResult, SystemDescriptor, Task};
use livelab_gateway::systems::AdapterError;
use livelab_gateway::{Adapter, SystemAdapter, SystemRequest, SystemResponse};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub task: Task,
    /// Requests ordered by popularity, most popular first.
    pub vocabulary: Vec<String>,
    pub oracle: BTreeMap<String, Vec<String>>,
    /// How many of the oracle's top documents are relevant.
    pub relevant: usize,
}

impl World {
    /// `queries` requests, each with an oracle ranking of `depth` documents
    /// drawn from a shared pool of `pool` documents.
    pub fn synthetic(
        task: Task,
        queries: usize,
        depth: usize,
        pool: usize,
        relevant: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool_ids: Vec<String> = (0..pool.max(depth)).map(|i| format!("doc{i:05}")).collect();
        let vocabulary: Vec<String> = (0..queries).map(|i| format!("query {i:04}")).collect();
        let oracle = vocabulary
            .iter()
            .map(|q| {
                let ranking: Vec<String> = pool_ids.choose_multiple(&mut rng, depth).cloned().collect();
                (q.clone(), ranking)
            })
            .collect();
        Self {
            task,
            vocabulary,
            oracle,
            relevant,
        }
    }

    /// Uses an existing system's top `depth` results as the oracle. Requests
    /// it does not answer are dropped from the vocabulary.
    pub fn from_adapter(
        task: Task,
        vocabulary: impl IntoIterator<Item = String>,
        adapter: &dyn SystemAdapter,
        depth: usize,
        relevant: usize,
    ) -> Result<Self, AdapterError> {
        let mut kept = Vec::new();
        let mut oracle = BTreeMap::new();
        for request in vocabulary {
            if oracle.contains_key(&request) {
                continue;
            }
            let response = adapter.try_respond(&SystemRequest {
                task,
                request: request.clone(),
                page: 0,
                rpp: depth,
            })?;
            if response.responded && !response.results.is_empty() {
                oracle.insert(
                    request.clone(),
                    response.results.into_iter().map(|r| r.doc_id).collect(),
                );
                kept.push(request);
            }
        }
        Ok(Self {
            task,
            vocabulary: kept,
            oracle,
            relevant,
        })
    }

    pub fn ranking(&self, request: &str) -> Option<&[String]> {
        self.oracle.get(request).map(Vec::as_slice)
    }

    pub fn relevant_docs(&self, request: &str) -> HashSet<String> {
        self.ranking(request)
            .map(|r| r.iter().take(self.relevant).cloned().collect())
            .unwrap_or_default()
    }
}

fn page_of(docs: &[String], request: &SystemRequest) -> SystemResponse {
    let first = request.page * request.rpp;
    SystemResponse {
        results: docs
            .iter()
            .enumerate()
            .skip(first)
            .take(request.rpp)
            .map(|(i, d)| RankedResult {
                doc_id: d.clone(),
                rank: i + 1,
                score: (docs.len() - i) as f64,
            })
            .collect(),
        num_found: docs.len(),
        responded: true,
    }
}

/// Returns the oracle ranking itself. Two of these with different names are
/// identical systems.
pub struct OracleSystem {
    descriptor: SystemDescriptor,
    world: std::sync::Arc<World>,
}

impl OracleSystem {
    pub fn new(descriptor: SystemDescriptor, world: std::sync::Arc<World>) -> Self {
        Self { descriptor, world }
    }
}

impl SystemAdapter for OracleSystem {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.descriptor
    }

    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        Ok(match self.world.ranking(request.request.trim()) {
            Some(docs) => page_of(docs, request),
            None => SystemResponse::no_response(),
        })
    }
}

/// Fetches another system's top `depth` results and serves them reversed.
pub struct ReversedSystem {
    descriptor: SystemDescriptor,
    inner: Adapter,
    depth: usize,
}

impl ReversedSystem {
    pub fn new(descriptor: SystemDescriptor, inner: Adapter, depth: usize) -> Self {
        Self {
            descriptor,
            inner,
            depth,
        }
    }
}

impl SystemAdapter for ReversedSystem {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.descriptor
    }

    fn try_respond(&self, request: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        let full = self.inner.try_respond(&SystemRequest {
            page: 0,
            rpp: self.depth,
            ..request.clone()
        })?;
        if !full.responded {
            return Ok(full);
        }
        let mut docs: Vec<String> = full.results.into_iter().map(|r| r.doc_id).collect();
        docs.reverse();
        Ok(page_of(&docs, request))
    }
}
