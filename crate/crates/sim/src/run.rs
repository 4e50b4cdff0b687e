//! Drives simulated sessions end to end: request a page, click on it, post
//! the clicks back.

use std::path::PathBuf;
use std::time::Duration;

use livelab_core::{Task, Timestamp};
use livelab_gateway::engine::FeedbackPayload;
use livelab_gateway::feedback::FeedbackAck;
use livelab_gateway::{Gateway, PageResponse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::click::{shown_docs, simulate_clicks};
use crate::sub_seed;
use crate::traffic::{QuerySampler, TrafficConfig};
use crate::world::World;

/// Why a call into the gateway failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetError {
    /// The gateway answered and refused this one call; the run continues.
    Refused(String),
    /// The gateway could not be reached; the run stops.
    Unreachable(String),
}

/// Something that serves pages and accepts feedback.
pub trait SimTarget {
    fn page(&self, task: Task, request: &str, user: &str, ts: Timestamp)
        -> Result<PageResponse, TargetError>;
    fn feedback(&self, payload: &FeedbackPayload) -> Result<FeedbackAck, TargetError>;
    /// The feedback log being written, when known.
    fn log_path(&self) -> Option<PathBuf> {
        None
    }
}

impl SimTarget for Gateway {
    fn page(
        &self,
        task: Task,
        request: &str,
        user: &str,
        ts: Timestamp,
    ) -> Result<PageResponse, TargetError> {
        self.handle(task, request, user, 0, None, ts)
            .map_err(|e| TargetError::Refused(e.to_string()))
    }

    fn feedback(&self, payload: &FeedbackPayload) -> Result<FeedbackAck, TargetError> {
        self.handle_feedback(payload)
            .map_err(|e| TargetError::Refused(e.to_string()))
    }

    fn log_path(&self) -> Option<PathBuf> {
        Some(self.store().path())
    }
}

/// A gateway reached over its HTTP API.
pub struct HttpTarget {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpTarget {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent: config.into(),
        }
    }

    fn read<T: serde::de::DeserializeOwned>(
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, TargetError> {
        let mut resp = result.map_err(|e| TargetError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TargetError::Unreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TargetError::Refused(format!("status {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| TargetError::Refused(format!("malformed response: {e}")))
    }
}

impl SimTarget for HttpTarget {
    fn page(
        &self,
        task: Task,
        request: &str,
        user: &str,
        _ts: Timestamp,
    ) -> Result<PageResponse, TargetError> {
        let (path, key) = match task {
            Task::Ranking => ("/api/v1/ranking", "query"),
            Task::Recommendation => ("/api/v1/recommendation/datasets", "itemid"),
        };
        Self::read(
            self.agent
                .get(format!("{}{path}", self.base_url))
                .query(key, request)
                .query("user", user)
                .call(),
        )
    }

    fn feedback(&self, payload: &FeedbackPayload) -> Result<FeedbackAck, TargetError> {
        let body = serde_json::to_string(payload).expect("payload serializes");
        Self::read(
            self.agent
                .post(format!("{}/api/v1/feedback", self.base_url))
                .content_type("application/json")
                .send(body),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub sessions: usize,
    pub requests: usize,
    /// Pages that carried an interleaving.
    pub impressions: usize,
    pub baseline_only: usize,
    pub clicks: usize,
    pub clicked_impressions: usize,
    pub feedback_posts: usize,
    /// Pages or feedback the gateway refused.
    pub refused: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// Set when the run stopped early.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Runs `config.sessions` sessions one after another. Each session draws
/// from its own sub-seed, so the sampled traffic of a session does not depend
/// on the others.
pub fn run_simulation(target: &dyn SimTarget, world: &World, config: &TrafficConfig) -> SimulationSummary {
    let mut summary = SimulationSummary {
        log: target.log_path(),
        ..SimulationSummary::default()
    };
    let Some(sampler) = QuerySampler::new(&world.vocabulary, config.zipf_exponent) else {
        if config.sessions > 0 {
            summary.aborted = Some("world has an empty vocabulary".into());
        }
        return summary;
    };
    let [lo, hi] = config.queries_per_session;
    for s in 0..config.sessions {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, s as u64));
        let user = format!("sim-{s:06}");
        let session_start = config.start_ms + s as i64 * config.session_gap_ms;
        let requests = rng.random_range(lo..=hi);
        summary.sessions += 1;
        for r in 0..requests {
            let ts = session_start + r as i64 * config.request_gap_ms;
            let request = sampler.sample(&mut rng);
            summary.requests += 1;
            let page = match target.page(world.task, request, &user, ts) {
                Ok(page) => page,
                Err(TargetError::Refused(_)) => {
                    summary.refused += 1;
                    continue;
                }
                Err(TargetError::Unreachable(e)) => {
                    summary.requests -= 1;
                    summary.aborted = Some(format!("gateway unreachable: {e}"));
                    return summary;
                }
            };
            let clicks = simulate_clicks(
                &shown_docs(&page),
                &world.relevant_docs(request),
                &config.click_model,
                world.task,
                ts,
                &mut rng,
            );
            let Some(impression_id) = page.header.impression_id else {
                summary.baseline_only += 1;
                continue;
            };
            summary.impressions += 1;
            if clicks.is_empty() {
                continue;
            }
            summary.clicks += clicks.len();
            summary.clicked_impressions += 1;
            match target.feedback(&FeedbackPayload {
                impression_id,
                clicks,
            }) {
                Ok(_) => summary.feedback_posts += 1,
                Err(TargetError::Refused(_)) => summary.refused += 1,
                Err(TargetError::Unreachable(e)) => {
                    summary.aborted = Some(format!("gateway unreachable: {e}"));
                    return summary;
                }
            }
        }
    }
    summary
}
