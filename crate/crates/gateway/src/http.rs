//! HTTP routes.
//!
//! ```text
//! GET  /health
//! GET  /sessions
//! POST /sessions                    {goal, backend?, corpus?, script?}  -> 201
//! GET  /sessions/{id}               snapshot of the durable state
//! POST /sessions/{id}/feedback      RawFeedback, optional Idempotency-Key header
//! GET  /sessions/{id}/events?from=  text/event-stream, resumable
//! ```
//!
//! Errors are `{"error": {"code": "...", "message": "..."}}`.
//!
//! The event stream sends each event as `id: <seq>`, `event: <kind>`,
//! `data: {"seq","at","kind","payload"}`. Clients resume with `from=` or a
//! `Last-Event-ID` header. Once the goal is done and every event has been
//! sent, an `end` event carrying `{"next": <seq>}` closes the stream.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::watch;
use tower_http::cors::{AllowOrigin, CorsLayer};
use wayfinder_core::projection::Phase;
use wayfinder_core::RawFeedback;

use crate::service::{ApiError, CreateSession, Gateway, LiveSession};

pub const IDEMPOTENCY_KEY: &str = "idempotency-key";

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

fn rejected(e: JsonRejection) -> ApiError {
    ApiError::BadRequest(e.body_text())
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    let cors = cors_layer(&gateway.config().cors_origins);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/events", get(stream_events))
        .layer(cors)
        .with_state(gateway)
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([
            axum::http::header::CONTENT_TYPE,
            HeaderName::from_static(IDEMPOTENCY_KEY),
            HeaderName::from_static("last-event-id"),
        ])
}

async fn health(State(gw): State<Arc<Gateway>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "sessions": gw.list().len()}))
}

async fn list_sessions(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(gw.list())
}

async fn create_session(
    State(gw): State<Arc<Gateway>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(rejected)?;
    let created = gw.create(req).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(gw.snapshot(&id)?))
}

async fn submit_feedback(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<RawFeedback>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    // unknown session wins over a bad body
    gw.session(&id)?;
    let Json(raw) = body.map_err(rejected)?;
    let key = match headers.get(IDEMPOTENCY_KEY) {
        Some(v) => Some(
            v.to_str()
                .ok()
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| ApiError::BadRequest("Idempotency-Key must be non-empty text".into()))?
                .to_string(),
        ),
        None => None,
    };
    Ok(Json(gw.submit(&id, raw, key).await?))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    from: Option<u64>,
}

struct Cursor {
    live: Arc<LiveSession>,
    rx: watch::Receiver<u64>,
    next: u64,
    ended: bool,
}

fn sse_event(ev: &wayfinder_core::SessionEvent) -> Event {
    Event::default().id(ev.seq.to_string()).event(ev.kind().as_str()).data(ev.to_line())
}

/// Durable events from `next` on, then live ones; ends after the goal is done.
fn event_stream(live: Arc<LiveSession>, from: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = live.watch();
    let start = Cursor { live, rx, next: from, ended: false };
    stream::unfold(start, |mut c| async move {
        if c.ended {
            return None;
        }
        loop {
            if let Some(ev) = c.live.durable_event(c.next) {
                c.next += 1;
                return Some((Ok(sse_event(&ev)), c));
            }
            if c.live.durable_phase() == Phase::GoalDone {
                c.ended = true;
                let end = Event::default().event("end").data(json!({"next": c.next}).to_string());
                return Some((Ok(end), c));
            }
            if c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn stream_events(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    let last_seen = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.trim().parse::<u64>().ok());
    let from = q.from.or(last_seen.map(|s| s + 1)).unwrap_or(0);
    let live = gw.subscribe(&id, from)?;
    Ok(Sse::new(event_stream(live, from)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

/// Serve until ctrl-c. Open event streams are dropped, not drained:
/// clients resume from their last seq.
pub async fn serve(gateway: Arc<Gateway>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tokio::select! {
        r = axum::serve(listener, router(gateway)) => r,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
