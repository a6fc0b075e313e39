//! HTTP API for the review UI.
//!
//! | route | result |
//! |---|---|
//! | `GET /status` | orchestrator status |
//! | `GET /queue/next?reviewer=R` | next item leased to R, or 204 |
//! | `POST /queue/{image_id}/verdict` | `{decision, class?, reviewer_id, timestamp}` |
//! | `GET /images/{image_id}` | raw image bytes |
//! | `GET /records/{image_id}` | stored dataset record |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use deskmark_core::dataset::DatasetStore;
use deskmark_core::orchestrator::{Decision, Orchestrator, OrchestratorError, Verdict};

use crate::commands::{image_mime, journal_lock, now_ms, open_orchestrator};
use crate::config::PipelineConfig;
use crate::error::{CliError, StageContext};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    orchestrator: Arc<Mutex<Orchestrator>>,
    dataset_root: PathBuf,
    review_images: Option<PathBuf>,
    token: Option<String>,
    clock: Clock,
}

impl AppState {
    pub fn new(orchestrator: Orchestrator, cfg: &PipelineConfig) -> Self {
        AppState {
            orchestrator: Arc::new(Mutex::new(orchestrator)),
            dataset_root: cfg.paths.dataset_root.clone(),
            review_images: cfg.paths.review_images.clone(),
            token: cfg.service.reviewer_token.clone(),
            clock: Arc::new(now_ms),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Runs `f` with the orchestrator locked, e.g. to close a round while the
    /// server is up.
    pub fn with_orchestrator<R>(&self, f: impl FnOnce(&mut Orchestrator) -> R) -> R {
        f(&mut self.orch())
    }

    fn orch(&self) -> std::sync::MutexGuard<'_, Orchestrator> {
        self.orchestrator.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn error(status: StatusCode, kind: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": {"kind": kind, "message": message.to_string()}}))).into_response()
}

fn orchestrator_error(e: OrchestratorError) -> Response {
    let (status, kind) = match &e {
        OrchestratorError::UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image"),
        OrchestratorError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
        OrchestratorError::WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
        OrchestratorError::Locked { .. } => (StatusCode::LOCKED, "locked"),
        OrchestratorError::Backend(_) => (StatusCode::BAD_GATEWAY, "backend"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    };
    error(status, kind, e)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token");
        }
    }
    next.run(req).await
}

async fn status(State(state): State<AppState>) -> Response {
    Json(state.orch().status()).into_response()
}

async fn queue_next(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(reviewer) = q.get("reviewer").filter(|r| !r.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "bad_request", "reviewer query parameter is required");
    };
    let now = (state.clock)();
    match state.orch().queue_next(reviewer, now) {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Deserialize)]
struct VerdictBody {
    #[serde(default)]
    image_id: Option<String>,
    #[serde(flatten)]
    decision: Decision,
    reviewer_id: String,
    #[serde(default)]
    timestamp: u64,
}

async fn verdict(State(state): State<AppState>, Path(image_id): Path<String>, body: axum::body::Bytes) -> Response {
    let body: VerdictBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e),
    };
    if body.image_id.as_ref().is_some_and(|id| *id != image_id) {
        return error(StatusCode::BAD_REQUEST, "bad_request", "image_id in body does not match the path");
    }
    if body.reviewer_id.is_empty() {
        return error(StatusCode::BAD_REQUEST, "bad_request", "reviewer_id is required");
    }
    let v = Verdict {
        image_id: image_id.clone(),
        decision: body.decision,
        reviewer_id: body.reviewer_id,
        timestamp: body.timestamp,
    };
    let now = (state.clock)();
    match state.orch().submit_verdict(v, now) {
        Ok(round) => Json(json!({"image_id": image_id, "round": round})).into_response(),
        Err(e) => orchestrator_error(e),
    }
}

fn safe_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && !id.contains(['/', '\\', '\0'])
}

fn find_image(state: &AppState, id: &str) -> Option<PathBuf> {
    if let Some(dir) = &state.review_images {
        for ext in ["png", "jpg", "jpeg"] {
            let p = dir.join(format!("{id}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    let store = DatasetStore::open(&state.dataset_root).ok()?;
    let record = store.get(id).ok()??;
    let p = store.resolve_image(&record);
    // Stored paths are relative to the root; refuse anything that escapes it.
    let root = state.dataset_root.canonicalize().ok()?;
    p.canonicalize().ok().filter(|c| c.starts_with(&root))
}

async fn image(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    if !safe_id(&id) {
        return error(StatusCode::NOT_FOUND, "not_found", "no such image");
    }
    let Some(path) = find_image(&state, &id) else {
        return error(StatusCode::NOT_FOUND, "not_found", "no such image");
    };
    match std::fs::read(&path) {
        Ok(bytes) => {
            let mime = image_mime(&bytes);
            ([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response()
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

async fn record(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    if !safe_id(&id) {
        return error(StatusCode::NOT_FOUND, "not_found", "no such record");
    }
    let found = DatasetStore::open(&state.dataset_root).and_then(|s| s.get(&id));
    match found {
        Ok(Some(r)) => Json(r).into_response(),
        Ok(None) => error(StatusCode::NOT_FOUND, "not_found", "no such record"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/queue/next", get(queue_next))
        .route("/queue/{image_id}/verdict", post(verdict))
        .route("/images/{image_id}", get(image))
        .route("/records/{image_id}", get(record))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// A server on its own thread and runtime. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves `state` on `bind` (port 0 picks a free one) in the background.
pub fn spawn_background(state: AppState, bind: &str) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener from std");
            let _ = axum::serve(listener, router(state))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// `deskmark serve`: blocks until interrupted.
pub fn run(cfg: &PipelineConfig, bind: Option<&str>) -> Result<(), CliError> {
    let bind = bind.unwrap_or(&cfg.service.bind);
    let _lock = journal_lock(cfg, "serve")?;
    let state = AppState::new(open_orchestrator(cfg)?, cfg);
    let rt = tokio::runtime::Runtime::new().stage()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        log::info!("review service listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
    .stage()
}
