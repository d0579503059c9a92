//! HTTP binding. Every route builds a `Command` and runs it through the same
//! executor as the CLI; `POST /ops` accepts any command as JSON.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ragops_core::engine::{Engine, EngineError, ErrorKind};
use serde::Deserialize;
use serde_json::json;

use crate::ops::{execute, Command};

pub const ROLE_HEADER: &str = "x-role";

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Invalid => StatusCode::BAD_REQUEST,
        ErrorKind::AccessDenied => StatusCode::FORBIDDEN,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Rejected => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error(status: StatusCode, kind: &str, msg: String) -> Response {
    (status, Json(json!({ "error": msg, "kind": kind }))).into_response()
}

fn bad_request(msg: impl std::fmt::Display) -> Response {
    error(StatusCode::BAD_REQUEST, "invalid", msg.to_string())
}

async fn run(engine: Arc<Engine>, cmd: Command) -> Response {
    // engine calls block on locks and model clients
    match tokio::task::spawn_blocking(move || execute(&engine, cmd)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => engine_error(&e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn engine_error(e: &EngineError) -> Response {
    let kind = e.kind();
    let name = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    error(status_for(kind), &name, e.to_string())
}

#[derive(Deserialize)]
struct QueryBody {
    query: String,
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    query_id: Option<String>,
}

async fn query(State(e): State<Arc<Engine>>, headers: HeaderMap, body: Bytes) -> Response {
    let b: QueryBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(err) => return bad_request(err),
    };
    let header = headers.get(ROLE_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let cmd = Command::Query {
        query: b.query,
        role: b.role.or(header),
        query_id: b.query_id,
    };
    run(e, cmd).await
}

async fn ingest(State(e): State<Arc<Engine>>, Query(q): Query<HashMap<String, String>>, body: Bytes) -> Response {
    let Ok(body) = String::from_utf8(body.to_vec()) else {
        return bad_request("body is not UTF-8");
    };
    let source_id = q.get("source_id").cloned().unwrap_or_else(|| "http".into());
    run(e, Command::IngestJsonl { source_id, body }).await
}

async fn ops(State(e): State<Arc<Engine>>, body: Bytes) -> Response {
    match serde_json::from_slice::<Command>(&body) {
        Ok(cmd) => run(e, cmd).await,
        Err(err) => bad_request(err),
    }
}

async fn trace(State(e): State<Arc<Engine>>, Path(trace_id): Path<String>) -> Response {
    run(e, Command::Trace { trace_id }).await
}

async fn lineage(State(e): State<Arc<Engine>>, Path(response_id): Path<String>) -> Response {
    run(e, Command::Lineage { response_id }).await
}

async fn coverage_reports(State(e): State<Arc<Engine>>) -> Response {
    run(e, Command::CoverageReports).await
}

async fn health(State(e): State<Arc<Engine>>) -> Response {
    run(e, Command::Health).await
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such route".into())
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/ingest", post(ingest))
        .route("/trace/{id}", get(trace))
        .route("/lineage/{response_id}", get(lineage))
        .route("/reports/coverage", get(coverage_reports))
        .route("/health", get(health))
        .route("/ops", post(ops))
        .fallback(not_found)
        .with_state(engine)
}

/// The fixed routes and the command each one runs; everything else goes through `/ops`.
pub const ROUTES: &[(&str, &str, &str)] = &[
    ("POST", "/query", "query"),
    ("POST", "/ingest", "ingest_jsonl"),
    ("GET", "/trace/{id}", "trace"),
    ("GET", "/lineage/{response_id}", "lineage"),
    ("GET", "/reports/coverage", "coverage_reports"),
    ("GET", "/health", "health"),
];

pub async fn serve(engine: Arc<Engine>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown())
        .await
}

async fn shutdown() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}
