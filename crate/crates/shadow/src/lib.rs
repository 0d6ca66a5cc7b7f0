//! Blinded shadow-mode study service.
//!
//! Clinicians step through hourly windows of held-out stays and submit a
//! mean and variance per drug. Submissions are appended to a JSONL log that
//! is replayed on start; scores are computed from the log on request.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};

use api::{CreateSession, PatientSummary, ScoresResponse, SessionView, SubmitRequest, SubmitResponse, WindowQuery, WindowView};
pub use error::ServiceError;
pub use store::{Store, Study};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<Store>>,
    clock: Clock,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        Self::with_clock(
            store,
            Arc::new(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0)
            }),
        )
    }

    pub fn with_clock(store: Store, clock: Clock) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
            clock,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

type Reply<T> = Result<T, ServiceError>;

async fn list_patients(State(s): State<AppState>) -> Json<Vec<PatientSummary>> {
    Json(s.lock().list_patients())
}

async fn window(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<WindowQuery>) -> Reply<Json<WindowView>> {
    Ok(Json(s.lock().window(&q.session, &id, q.t)?))
}

async fn create_session(State(s): State<AppState>, Json(req): Json<CreateSession>) -> Reply<(StatusCode, Json<SessionView>)> {
    let now = (s.clock)();
    Ok((StatusCode::CREATED, Json(s.lock().create_session(&req.clinician_id, now)?)))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> Reply<Json<SessionView>> {
    Ok(Json(s.lock().session(&id)?))
}

async fn submit(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SubmitRequest>,
) -> Reply<(StatusCode, Json<SubmitResponse>)> {
    let now = (s.clock)();
    let mut store = s.lock();
    let record = store.submit(&id, &req, now)?;
    let next_point = store.session(&id)?.next_point;
    Ok((StatusCode::CREATED, Json(SubmitResponse { record, next_point })))
}

async fn scores(State(s): State<AppState>, Path(id): Path<String>) -> Reply<Json<ScoresResponse>> {
    let scores = s.lock().scores(&id)?;
    Ok(Json(ScoresResponse {
        study_id: id,
        table: scores.to_tsv(),
        scores,
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/patients", get(list_patients))
        .route("/api/patients/{id}/window", get(window))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/recommendations", post(submit))
        .route("/api/studies/{id}/scores", get(scores))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "shadow service listening");
    axum::serve(listener, router(state)).await
}
