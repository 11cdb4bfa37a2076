//! HTTP API for human verification, plus the loop driver it unblocks.
//!
//! The workspace lives behind one mutex. The driver thread steps the loop
//! on a copy and commits the result only if no decision landed meanwhile;
//! while a batch awaits verification it sleeps on a condition variable that
//! every decision signals.

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Result;
use crate::orchestrator::{Engine, Phase, StepOutcome, Workspace};
use crate::verify::{DecisionRequest, ItemStatus, StatusCounts, VerifyError};

pub struct Shared {
    pub ws: Workspace,
    /// Bumped on every committed change.
    pub version: u64,
    pub snapshot: Option<PathBuf>,
    /// Last error that stopped the driver.
    pub driver_error: Option<String>,
}

#[derive(Clone)]
pub struct Hub {
    inner: Arc<(Mutex<Shared>, Condvar)>,
}

impl Hub {
    pub fn new(ws: Workspace, snapshot: Option<PathBuf>) -> Self {
        Hub {
            inner: Arc::new((
                Mutex::new(Shared {
                    ws,
                    version: 0,
                    snapshot,
                    driver_error: None,
                }),
                Condvar::new(),
            )),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Shared> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, g: &mut Shared) -> Result<()> {
        g.version += 1;
        self.inner.1.notify_all();
        match &g.snapshot {
            Some(p) => g.ws.save(p),
            None => Ok(()),
        }
    }

    /// Steps the loop until it finishes, sleeping while verification is
    /// outstanding.
    pub fn spawn_driver(&self, mut engine: Engine) -> JoinHandle<Result<()>> {
        let hub = self.clone();
        thread::spawn(move || loop {
            let (mut ws, version) = {
                let g = hub.lock();
                if g.ws.phase == Phase::Done {
                    return Ok(());
                }
                (g.ws.clone(), g.version)
            };
            match engine.step(&mut ws) {
                Ok(StepOutcome::Progressed) => {
                    let mut g = hub.lock();
                    if g.version == version {
                        g.ws = ws;
                        hub.commit(&mut g)?;
                    }
                }
                Ok(StepOutcome::AwaitingVerification { .. }) => {
                    let g = hub.lock();
                    let _ = hub
                        .inner
                        .1
                        .wait_timeout_while(g, Duration::from_secs(1), |g| g.version == version);
                }
                Ok(StepOutcome::Done) => return Ok(()),
                Err(e) => {
                    tracing::error!(error = %e, "loop driver stopped");
                    hub.lock().driver_error = Some(e.to_string());
                    return Err(e);
                }
            }
        })
    }
}

#[derive(Clone)]
struct AppState {
    hub: Hub,
    token: Option<String>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<VerifyError> for ApiError {
    fn from(e: VerifyError) -> Self {
        let code = match e {
            VerifyError::NotFound(_) => StatusCode::NOT_FOUND,
            VerifyError::NotPending { .. } | VerifyError::Pool(_) => StatusCode::CONFLICT,
            VerifyError::MissingText
            | VerifyError::UnchangedEdit
            | VerifyError::MissingAnnotator => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(code, e.to_string())
    }
}

#[derive(Deserialize)]
struct ItemsQuery {
    status: Option<String>,
    iteration: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: String,
    /// Iteration currently being labeled (0 for test set and bootstrap).
    pub iteration: u32,
    pub completed_iterations: u32,
    pub budget_initial: usize,
    pub budget_remaining: usize,
    pub batch_size: usize,
    pub strategy: String,
    pub counts: StatusCounts,
    pub totals: StatusCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_error: Option<String>,
}

pub fn progress(g: &Shared) -> Progress {
    let ws = &g.ws;
    let l = &ws.loop_state;
    let iteration = ws.job().map_or(l.iteration, |j| j.iteration);
    Progress {
        phase: ws.phase.name().into(),
        iteration,
        completed_iterations: l.iteration,
        budget_initial: l.budget_initial,
        budget_remaining: l.budget_remaining,
        batch_size: l.batch_size,
        strategy: l.strategy.to_string(),
        counts: ws.queue.counts(Some(iteration)),
        totals: ws.queue.counts(None),
        driver_error: g.driver_error.clone(),
    }
}

async fn list_items(
    State(st): State<AppState>,
    Query(q): Query<ItemsQuery>,
) -> std::result::Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(
            s.parse::<ItemStatus>()
                .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e))?,
        ),
    };
    let g = st.hub.lock();
    let items: Vec<_> =
        g.ws.queue
            .filter(status, q.iteration)
            .into_iter()
            .cloned()
            .collect();
    Ok(Json(items).into_response())
}

async fn decide(
    State(st): State<AppState>,
    Path(id): Path<u64>,
    body: Bytes,
) -> std::result::Result<Response, ApiError> {
    let req: DecisionRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError(
            StatusCode::BAD_REQUEST,
            format!("invalid decision body: {e}"),
        )
    })?;
    let mut g = st.hub.lock();
    let at = g.ws.clock.now();
    let ws = &mut g.ws;
    let (item, _) = ws.queue.decide(&mut ws.pool, id, req, at)?;
    st.hub
        .commit(&mut g)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    tracing::info!(
        item = id,
        status = item.status.as_str(),
        "decision recorded"
    );
    Ok(Json(item).into_response())
}

async fn get_progress(State(st): State<AppState>) -> Json<Progress> {
    Json(progress(&st.hub.lock()))
}

async fn get_metrics(State(st): State<AppState>) -> std::result::Result<Response, ApiError> {
    let g = st.hub.lock();
    match g.ws.latest_metrics() {
        Some(m) => Ok(Json(m.clone()).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, "no metrics yet".into())),
    }
}

async fn auth(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError(
                StatusCode::UNAUTHORIZED,
                "missing or invalid bearer token".into(),
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such endpoint".into())
}

pub fn router(hub: Hub, token: Option<String>, ui_dir: Option<PathBuf>) -> Router {
    let state = AppState { hub, token };
    let api = Router::new()
        .route("/items", get(list_items))
        .route("/items/{id}/decision", post(decide))
        .route("/progress", get(get_progress))
        .route("/metrics", get(get_metrics))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Serves `router` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
