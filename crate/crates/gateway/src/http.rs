//! HTTP front end for a [`Gateway`], plus the periodic feedback flush.

use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use livelab_core::{Task, Timestamp};
use serde::Deserialize;
use serde_json::json;

use crate::engine::{FeedbackPayload, Gateway, GatewayError};
use crate::feedback::FeedbackSink;

const ANONYMOUS: &str = "anonymous";

/// Query string of `GET /api/v1/ranking`.
#[derive(Debug, Deserialize)]
pub struct RankingParams {
    #[serde(alias = "q")]
    pub query: Option<String>,
    #[serde(default)]
    pub page: usize,
    pub rpp: Option<usize>,
    pub user: Option<String>,
}

/// Query string of `GET /api/v1/recommendation/datasets`.
#[derive(Debug, Deserialize)]
pub struct RecommendationParams {
    #[serde(alias = "item_id")]
    pub itemid: Option<String>,
    #[serde(default)]
    pub page: usize,
    pub rpp: Option<usize>,
    pub user: Option<String>,
}

pub fn now_ms() -> Timestamp {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Timestamp)
        .unwrap_or(0)
}

struct ApiError(GatewayError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::TaskNotConfigured(_) => StatusCode::NOT_FOUND,
            GatewayError::FeedbackRejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            GatewayError::BaselineFailed { .. } => StatusCode::BAD_GATEWAY,
            GatewayError::Store(_) | GatewayError::Startup(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

async fn blocking<T, F>(gateway: Arc<Gateway>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Gateway) -> Result<T, GatewayError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&gateway))
        .await
        .map_err(|e| ApiError(GatewayError::Startup(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn ranking(
    State(gw): State<Arc<Gateway>>,
    Query(p): Query<RankingParams>,
) -> Result<impl IntoResponse, ApiError> {
    let query = p.query.unwrap_or_default();
    let user = p.user.unwrap_or_else(|| ANONYMOUS.into());
    let page = blocking(gw, move |g| {
        g.handle(Task::Ranking, &query, &user, p.page, p.rpp, now_ms())
    })
    .await?;
    Ok(Json(page))
}

async fn recommendation(
    State(gw): State<Arc<Gateway>>,
    Query(p): Query<RecommendationParams>,
) -> Result<impl IntoResponse, ApiError> {
    let item = p.itemid.unwrap_or_default();
    let user = p.user.unwrap_or_else(|| ANONYMOUS.into());
    let page = blocking(gw, move |g| {
        g.handle(Task::Recommendation, &item, &user, p.page, p.rpp, now_ms())
    })
    .await?;
    Ok(Json(page))
}

async fn feedback(
    State(gw): State<Arc<Gateway>>,
    payload: Result<Json<FeedbackPayload>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(payload) = payload.map_err(|e| ApiError(GatewayError::BadRequest(e.body_text())))?;
    let ack = blocking(gw, move |g| g.handle_feedback(&payload)).await?;
    Ok(Json(ack))
}

async fn systems(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(gw.descriptors())
}

async fn health(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(json!({
        "status": "ready",
        "tasks": gw.tasks(),
        "requests": gw.requests_served(),
        "log_records": gw.store().len(),
        "forwarded": gw.store().forwarded(),
    }))
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/api/v1/ranking", get(ranking))
        .route("/api/v1/recommendation/datasets", get(recommendation))
        .route("/api/v1/feedback", post(feedback))
        .route("/api/v1/systems", get(systems))
        .route("/api/v1/health", get(health))
        .with_state(gateway)
}

/// Flushes the store to the sink every `interval` until the task is dropped.
pub fn spawn_flusher(
    gateway: Arc<Gateway>,
    sink: Arc<dyn FeedbackSink>,
    interval: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(interval);
        ticker.tick().await;
        loop {
            ticker.tick().await;
            let (gw, sink) = (gateway.clone(), sink.clone());
            match tokio::task::spawn_blocking(move || gw.store().flush(sink.as_ref())).await {
                Ok(Ok(n)) if n > 0 => tracing::info!(forwarded = n, "feedback flushed"),
                Ok(Ok(_)) => {}
                Ok(Err(e)) => tracing::warn!(error = %e, "feedback flush failed; will retry"),
                Err(e) => tracing::warn!(error = %e, "flush task panicked"),
            }
        }
    })
}

/// Serves on `listener` until ctrl-c, flushing periodically and once more on
/// shutdown.
pub async fn serve(
    gateway: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    sink: Option<Arc<dyn FeedbackSink>>,
    flush_interval: Duration,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    let flusher = sink
        .clone()
        .map(|s| spawn_flusher(gateway.clone(), s, flush_interval));
    axum::serve(listener, router(gateway.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(handle) = flusher {
        handle.abort();
    }
    if let Some(sink) = sink {
        if let Err(e) = gateway.store().flush(sink.as_ref()) {
            tracing::warn!(error = %e, "final feedback flush failed");
        }
    }
    Ok(())
}
