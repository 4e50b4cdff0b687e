//! Serves any [`SystemAdapter`] over the participant contract, and a small
//! helper to run a router on a background thread (stub systems, tests, and
//! the simulator's HTTP mode).

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::Query;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use livelab_core::Task;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;

use crate::systems::{ParticipantHeader, ParticipantItem, ParticipantResponse, SystemAdapter, SystemRequest};

#[derive(Debug, Deserialize)]
struct ContractParams {
    query: Option<String>,
    itemid: Option<String>,
    #[serde(default)]
    page: usize,
    rpp: Option<usize>,
}

async fn answer(adapter: Arc<dyn SystemAdapter>, task: Task, p: ContractParams) -> Response {
    let request = match task {
        Task::Ranking => p.query,
        Task::Recommendation => p.itemid,
    };
    let Some(request) = request else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "missing request"}))).into_response();
    };
    let rpp = p.rpp.unwrap_or(10);
    let sys_request = SystemRequest {
        task,
        request: request.clone(),
        page: p.page,
        rpp,
    };
    let result = tokio::task::spawn_blocking(move || adapter.try_respond(&sys_request)).await;
    match result {
        Ok(Ok(resp)) if resp.responded => {
            let (q, itemid) = match task {
                Task::Ranking => (Some(request), None),
                Task::Recommendation => (None, Some(request)),
            };
            Json(ParticipantResponse {
                header: ParticipantHeader {
                    q,
                    itemid,
                    page: p.page,
                    rpp,
                    num_found: resp.num_found,
                },
                body: resp
                    .results
                    .into_iter()
                    .map(|r| ParticipantItem {
                        docid: r.doc_id,
                        score: Some(r.score),
                    })
                    .collect(),
            })
            .into_response()
        }
        Ok(Ok(_)) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => (StatusCode::BAD_GATEWAY, Json(json!({"error": e.to_string()}))).into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": e.to_string()})),
        )
            .into_response(),
    }
}

/// `/index`, `/ranking` and `/recommendation` backed by `adapter`.
pub fn participant_router(adapter: Arc<dyn SystemAdapter>) -> Router {
    let rank = adapter.clone();
    let rec = adapter;
    Router::new()
        .route("/index", get(|| async { Json(json!({"ready": true})) }))
        .route(
            "/ranking",
            get(move |Query(p): Query<ContractParams>| answer(rank.clone(), Task::Ranking, p)),
        )
        .route(
            "/recommendation",
            get(move |Query(p): Query<ContractParams>| answer(rec.clone(), Task::Recommendation, p)),
        )
}

/// A router served on 127.0.0.1 from its own runtime thread. Stops on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(router: Router) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
