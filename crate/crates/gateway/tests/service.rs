//! End-to-end behaviour of the gateway: remote adapters over HTTP, rotation
//! fairness, label replay, conservation, forwarding and crash recovery.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::routing::get;
use axum::{Json, Router};
use livelab_core::ingest::{RunEntry, RunFile};
use livelab_core::metrics::RewardWeights;
use livelab_core::store::Snapshot;
use livelab_core::{ClickEvent, HeadQuery, RankedResult, SystemDescriptor, SystemKind, Task, Team};
use livelab_gateway::engine::PageResponse;
use livelab_gateway::feedback::{ForwardedEntry, SinkError};
use livelab_gateway::http::router;
use livelab_gateway::participant::{participant_router, BackgroundServer};
use livelab_gateway::systems::{AdapterError, PrecomputedSystem, RemoteContract, RemoteSystem};
use livelab_gateway::{
    Adapter, DirectorySink, FeedbackPayload, FeedbackSink, FeedbackStore, Gateway, GatewayParts, RppLimits,
    SystemAdapter, SystemRequest, SystemResponse,
};
use serde_json::json;

fn descriptor(name: &str, task: Task, baseline: bool) -> SystemDescriptor {
    SystemDescriptor {
        name: name.into(),
        kind: SystemKind::LiveRemote,
        task,
        is_baseline: baseline,
        source: None,
    }
}

/// Answers every request with the same ranked list.
struct Fixed {
    d: SystemDescriptor,
    docs: Vec<String>,
}

impl Fixed {
    fn adapter(name: &str, baseline: bool, docs: &[&str]) -> Adapter {
        Arc::new(Fixed {
            d: descriptor(name, Task::Ranking, baseline),
            docs: docs.iter().map(|d| d.to_string()).collect(),
        })
    }
}

impl SystemAdapter for Fixed {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.d
    }

    fn try_respond(&self, r: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        let results: Vec<RankedResult> = self
            .docs
            .iter()
            .enumerate()
            .skip(r.page * r.rpp)
            .take(r.rpp)
            .map(|(i, d)| RankedResult {
                doc_id: d.clone(),
                rank: i + 1,
                score: (100 - i) as f64,
            })
            .collect();
        Ok(SystemResponse {
            results,
            num_found: self.docs.len(),
            responded: true,
        })
    }
}

fn gateway(log: &Path, adapters: Vec<Adapter>, seed: u64) -> Gateway {
    Gateway::from_parts(GatewayParts {
        adapters,
        rpp: RppLimits::default(),
        session_timeout: Duration::from_secs(1800),
        rotation_seed: seed,
        weights: RewardWeights::default(),
        store: Arc::new(FeedbackStore::open(log).unwrap()),
    })
    .unwrap()
}

const BASE_DOCS: [&str; 10] = ["b1", "b2", "b3", "b4", "b5", "b6", "b7", "b8", "b9", "b10"];

fn stub_participant(body: serde_json::Value, delay: Duration) -> BackgroundServer {
    let app = Router::new()
        .route("/index", get(|| async { Json(json!({"ready": true})) }))
        .route(
            "/ranking",
            get(move || {
                let body = body.clone();
                async move {
                    tokio::time::sleep(delay).await;
                    Json(body)
                }
            }),
        );
    BackgroundServer::start(app).unwrap()
}

fn remote(server: &BackgroundServer, timeout: Duration) -> Adapter {
    Arc::new(RemoteSystem::new(
        descriptor("remote", Task::Ranking, false),
        RemoteContract::new(server.url()),
        timeout,
        4,
    ))
}

#[test]
fn remote_stub_is_interleaved_with_the_baseline() {
    let server = stub_participant(
        json!({"header": {"q": "covid", "page": 0, "rpp": 10, "num_found": 3},
               "body": [{"docid": "r1"}, {"docid": "r2"}, {"docid": "r3"}]}),
        Duration::ZERO,
    );
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let gw = gateway(
        &log,
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            remote(&server, Duration::from_secs(2)),
        ],
        1,
    );
    let page = gw.handle_ranking("covid", "u", 0, None, 0).unwrap();
    assert!(page.is_interleaved());
    let exp: Vec<&str> = page
        .body
        .iter()
        .filter(|i| i.team == Team::Exp)
        .map(|i| i.docid.as_str())
        .collect();
    assert_eq!(exp, vec!["r1", "r2", "r3"]);
    assert_eq!(page.body.len(), 10);
    assert_eq!(page.header.num_found, 10);
}

#[test]
fn slow_or_malformed_remote_falls_back_to_baseline() {
    let slow = stub_participant(
        json!({"header": {"page": 0, "rpp": 10, "num_found": 1}, "body": [{"docid": "r1"}]}),
        Duration::from_millis(800),
    );
    let dup = stub_participant(
        json!({"header": {"page": 0, "rpp": 10, "num_found": 2}, "body": [{"docid": "r1"}, {"docid": "r1"}]}),
        Duration::ZERO,
    );
    for (server, timeout) in [
        (&slow, Duration::from_millis(150)),
        (&dup, Duration::from_secs(2)),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let gw = gateway(
            &log,
            vec![Fixed::adapter("base", true, &BASE_DOCS), remote(server, timeout)],
            1,
        );
        let page = gw.handle_ranking("covid", "u", 0, None, 0).unwrap();
        assert!(!page.is_interleaved());
        assert!(page.body.iter().all(|i| i.team == Team::Base));
        let snap = Snapshot::load(&log).unwrap();
        assert!(snap.impressions.is_empty());
        assert_eq!(snap.requests.len(), 1);
    }
}

#[test]
fn precomputed_system_round_trips_over_the_participant_contract() {
    let entries = (1..=8)
        .map(|r| RunEntry {
            doc_id: format!("ZA{r}"),
            rank: r,
            score: 1.0 / r as f64,
        })
        .collect();
    let run = RunFile {
        tag: "tekma_n".into(),
        entries: [("gesis-ssoar-62031".to_owned(), entries)].into_iter().collect(),
    };
    let mut d = descriptor("tekma_n", Task::Recommendation, false);
    d.kind = SystemKind::Precomputed;
    let inner: Adapter = Arc::new(PrecomputedSystem::new(d, run, &[]));
    let server = BackgroundServer::start(participant_router(inner)).unwrap();
    let sys = RemoteSystem::new(
        descriptor("tekma_n", Task::Recommendation, false),
        RemoteContract::new(server.url()),
        Duration::from_secs(2),
        2,
    );
    assert!(sys.trigger_index().unwrap());
    let hit = sys
        .try_respond(&SystemRequest::recommendation("gesis-ssoar-62031", 0, 6))
        .unwrap();
    assert_eq!(hit.doc_ids(), vec!["ZA1", "ZA2", "ZA3", "ZA4", "ZA5", "ZA6"]);
    let miss = sys
        .try_respond(&SystemRequest::recommendation("unknown", 0, 6))
        .unwrap();
    assert!(!miss.responded);
}

#[test]
fn recommendation_seed_is_interleaved_and_capped() {
    let entries = (1..=8)
        .map(|r| RunEntry {
            doc_id: format!("ZA{r}"),
            rank: r,
            score: 1.0 / r as f64,
        })
        .collect();
    let run = RunFile {
        tag: "save_fami".into(),
        entries: [("gesis-ssoar-62031".to_owned(), entries)].into_iter().collect(),
    };
    let mut d = descriptor("save_fami", Task::Recommendation, false);
    d.kind = SystemKind::Precomputed;
    let exp: Adapter = Arc::new(PrecomputedSystem::new(d, run, &[]));
    let base: Adapter = Arc::new(Fixed {
        d: descriptor("gesis_rec_pyserini", Task::Recommendation, true),
        docs: (1..=9).map(|i| format!("B{i}")).collect(),
    });
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&dir.path().join("log.jsonl"), vec![base, exp], 3);
    let page = gw
        .handle_recommendation("gesis-ssoar-62031", "u", 0, Some(6), 0)
        .unwrap();
    assert!(page.is_interleaved());
    assert_eq!(page.body.len(), 6);
    assert_eq!(page.header.itemid.as_deref(), Some("gesis-ssoar-62031"));
    let other = gw
        .handle_recommendation("gesis-ssoar-1", "u", 0, None, 0)
        .unwrap();
    assert!(!other.is_interleaved());
    assert!(other.body.len() <= 6);
}

#[test]
fn rotation_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(
        &dir.path().join("two.jsonl"),
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("a", false, &["a1", "a2"]),
            Fixed::adapter("b", false, &["b1", "x2"]),
        ],
        2024,
    );
    for i in 0..10_000 {
        gw.handle_ranking("q", &format!("u{}", i % 500), 0, None, i)
            .unwrap();
    }
    let counts = gw.counts();
    for name in ["a", "b"] {
        let n = counts.selected[name] as i64;
        assert!((n - 5000).abs() <= 300, "{name} selected {n} times");
    }

    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(
        &dir.path().join("three.jsonl"),
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("a", false, &["a1"]),
            Fixed::adapter("b", false, &["b9"]),
            Fixed::adapter("c", false, &["c1"]),
        ],
        99,
    );
    let n = 9_000;
    for i in 0..n {
        gw.handle_ranking("q", "u", 0, None, i).unwrap();
    }
    let bound = 4.0 * (n as f64).sqrt();
    for (name, count) in gw.counts().selected {
        assert!((count as f64 - n as f64 / 3.0).abs() <= bound, "{name}: {count}");
    }
}

#[test]
fn wire_labels_replay_from_the_store_and_counts_are_conserved() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let silent: Adapter = Arc::new(Silent(descriptor("silent", Task::Ranking, false)));
    let gw = gateway(
        &log,
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("exp", false, &["b3", "e1", "b1", "e2", "e3"]),
            silent,
        ],
        5,
    );
    let mut pages: Vec<PageResponse> = Vec::new();
    for i in 0..300 {
        pages.push(
            gw.handle_ranking("covid", &format!("u{}", i % 40), 0, None, i * 1000)
                .unwrap(),
        );
    }
    let mut clicked = 0;
    for page in pages.iter().filter(|p| p.is_interleaved()).step_by(3) {
        let payload = FeedbackPayload {
            impression_id: page.header.impression_id.unwrap(),
            clicks: vec![ClickEvent::new(page.body[0].docid.clone(), "Title", 1)],
        };
        gw.handle_feedback(&payload).unwrap();
        clicked += 1;
    }
    let snap = Snapshot::load(&log).unwrap();
    let interleaved: Vec<&PageResponse> = pages.iter().filter(|p| p.is_interleaved()).collect();
    assert_eq!(snap.impressions.len(), interleaved.len());
    assert_eq!(snap.impressions.len() as u64, gw.counts().interleaved);
    assert_eq!(snap.requests.len(), pages.len() - interleaved.len());
    assert!(snap.feedback_events <= snap.impressions.len());
    assert_eq!(snap.feedback_events, clicked);
    for page in interleaved {
        let stored = snap.impression(page.header.impression_id.unwrap()).unwrap();
        let wire: Vec<(String, Team)> = page.body.iter().map(|i| (i.docid.clone(), i.team)).collect();
        let kept: Vec<(String, Team)> = stored
            .interleaved
            .entries
            .iter()
            .map(|e| (e.docid.clone(), e.team))
            .collect();
        assert_eq!(wire, kept);
    }
}

struct Silent(SystemDescriptor);

impl SystemAdapter for Silent {
    fn descriptor(&self) -> &SystemDescriptor {
        &self.0
    }

    fn try_respond(&self, _: &SystemRequest) -> Result<SystemResponse, AdapterError> {
        Err(AdapterError::Timeout)
    }
}

/// Counts deliveries per sequence number; can be switched off.
#[derive(Default)]
struct CountingSink {
    seen: Mutex<HashMap<u64, usize>>,
    down: std::sync::atomic::AtomicBool,
    calls: AtomicUsize,
}

impl FeedbackSink for CountingSink {
    fn deliver(&self, batch: &[ForwardedEntry]) -> Result<(), SinkError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.down.load(Ordering::SeqCst) {
            return Err(SinkError::Rejected("down".into()));
        }
        std::thread::sleep(Duration::from_millis(1));
        let mut seen = self.seen.lock().unwrap();
        for e in batch {
            *seen.entry(e.seq).or_default() += 1;
        }
        Ok(())
    }
}

#[test]
fn concurrent_flushes_forward_each_entry_once() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let gw = Arc::new(gateway(
        &log,
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("exp", false, &["e1", "e2"]),
        ],
        8,
    ));
    let sink = Arc::new(CountingSink::default());
    let writers: Vec<_> = (0..4)
        .map(|w| {
            let gw = gw.clone();
            std::thread::spawn(move || {
                for i in 0..200 {
                    gw.handle_ranking("q", &format!("w{w}"), 0, None, i).unwrap();
                }
            })
        })
        .collect();
    let flushers: Vec<_> = (0..4)
        .map(|_| {
            let (gw, sink) = (gw.clone(), sink.clone());
            std::thread::spawn(move || {
                let mut total = 0;
                for _ in 0..50 {
                    total += gw.store().flush(sink.as_ref()).unwrap();
                }
                total
            })
        })
        .collect();
    for w in writers {
        w.join().unwrap();
    }
    let mut forwarded: usize = flushers.into_iter().map(|f| f.join().unwrap()).sum();
    forwarded += gw.store().flush(sink.as_ref()).unwrap();
    let entries = gw.store().len();
    assert_eq!(forwarded, entries);
    let seen = sink.seen.lock().unwrap();
    assert_eq!(seen.len(), entries);
    assert!(seen.values().all(|&n| n == 1));
}

#[test]
fn sink_outage_keeps_entries_pending() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let gw = gateway(
        &log,
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("exp", false, &["e1"]),
        ],
        8,
    );
    for i in 0..4 {
        gw.handle_ranking("q", "u", 0, None, i).unwrap();
    }
    let sink = CountingSink::default();
    sink.down.store(true, Ordering::SeqCst);
    assert!(gw.store().flush(&sink).is_err());
    assert_eq!(gw.store().forwarded(), 0);
    sink.down.store(false, Ordering::SeqCst);
    assert_eq!(gw.store().flush(&sink).unwrap(), 5);
    assert_eq!(gw.store().flush(&sink).unwrap(), 0);

    let missing = DirectorySink::new(dir.path().join("nope"));
    gw.handle_ranking("q", "u", 0, None, 10).unwrap();
    assert!(gw.store().flush(&missing).is_err());
    std::fs::create_dir(dir.path().join("nope")).unwrap();
    assert_eq!(gw.store().flush(&missing).unwrap(), 1);
    assert!(missing.entry_path(5).exists());
}

#[test]
fn torn_tail_is_dropped_and_ids_resume() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let last = {
        let gw = gateway(
            &log,
            vec![
                Fixed::adapter("base", true, &BASE_DOCS),
                Fixed::adapter("exp", false, &["e1"]),
            ],
            8,
        );
        let mut last = None;
        for i in 0..5 {
            last = gw
                .handle_ranking("q", "u", 0, None, i)
                .unwrap()
                .header
                .impression_id;
        }
        last.unwrap()
    };
    let intact = Snapshot::load(&log).unwrap();
    // Simulate a crash halfway through writing a record.
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    f.write_all(br#"{"record":"impression","impression_id":9"#)
        .unwrap();
    drop(f);

    let gw = gateway(
        &log,
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("exp", false, &["e1"]),
        ],
        8,
    );
    assert_eq!(gw.store().len(), intact.impressions.len() + intact.sessions.len());
    let next = gw.handle_ranking("q", "v", 0, None, 100).unwrap();
    assert!(next.header.impression_id.unwrap() > last);
    let reloaded = Snapshot::load(&log).unwrap();
    assert_eq!(reloaded.impressions.len(), intact.impressions.len() + 1);
}

#[test]
fn http_api_serves_pages_and_accepts_feedback() {
    let dir = tempfile::tempdir().unwrap();
    let gw = Arc::new(gateway(
        &dir.path().join("log.jsonl"),
        vec![
            Fixed::adapter("base", true, &BASE_DOCS),
            Fixed::adapter("exp", false, &["e1", "e2", "e3"]),
        ],
        8,
    ));
    let server = BackgroundServer::start(router(gw.clone())).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let url = |p: &str| format!("{}{}", server.url(), p);

    let mut resp = agent
        .get(url("/api/v1/ranking"))
        .query("query", "covid")
        .query("user", "s1")
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let page: PageResponse = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    let raw: serde_json::Value = serde_json::to_value(&page).unwrap();
    assert!(raw["body"][0]["type"] == "EXP" || raw["body"][0]["type"] == "BASE");
    let id = page.header.impression_id.unwrap();

    let payload = json!({"impression_id": id, "clicks": [{"docid": page.body[0].docid, "element": "Fulltext", "ts": 5}]});
    for expected in [1, 0] {
        let mut r = agent
            .post(url("/api/v1/feedback"))
            .content_type("application/json")
            .send(payload.to_string())
            .unwrap();
        assert_eq!(r.status().as_u16(), 200);
        let ack: serde_json::Value = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
        assert_eq!(ack["stored"], expected);
    }
    let unknown = json!({"impression_id": 12345, "clicks": []});
    let r = agent
        .post(url("/api/v1/feedback"))
        .content_type("application/json")
        .send(unknown.to_string())
        .unwrap();
    assert_eq!(r.status().as_u16(), 422);

    assert_eq!(
        agent
            .get(url("/api/v1/ranking"))
            .call()
            .unwrap()
            .status()
            .as_u16(),
        400
    );
    assert_eq!(
        agent
            .get(url("/api/v1/recommendation/datasets"))
            .query("itemid", "x")
            .call()
            .unwrap()
            .status()
            .as_u16(),
        404
    );
    let mut systems = agent.get(url("/api/v1/systems")).call().unwrap();
    let listed: Vec<SystemDescriptor> =
        serde_json::from_str(&systems.body_mut().read_to_string().unwrap()).unwrap();
    assert_eq!(listed.len(), 2);
    assert_eq!(
        agent.get(url("/api/v1/health")).call().unwrap().status().as_u16(),
        200
    );
}

#[test]
fn head_query_lookup_is_case_insensitive() {
    let entries = vec![RunEntry {
        doc_id: "M1".into(),
        rank: 1,
        score: 1.0,
    }];
    let run = RunFile {
        tag: "t".into(),
        entries: [("7".to_owned(), entries)].into_iter().collect(),
    };
    let head = vec![HeadQuery {
        qid: 7,
        qstr: "Diabetes".into(),
        freq: 3,
    }];
    let sys = PrecomputedSystem::new(descriptor("t", Task::Ranking, false), run, &head);
    assert!(
        sys.try_respond(&SystemRequest::ranking("DIABETES", 0, 10))
            .unwrap()
            .responded
    );
}
