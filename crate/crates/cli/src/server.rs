//! JSON API over an [`AnnotationService`]. Reference codes and model scores
//! are never returned by the annotation endpoints; only `/api/report`
//! exposes aggregate agreement.

use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rac_core::annotation::{AnnotationRecord, AnnotationService};
use rac_core::Error;

pub type Shared = Arc<RwLock<AnnotationService>>;

pub fn shared(service: AnnotationService) -> Shared {
    Arc::new(RwLock::new(service))
}

/// Routes under `/api`; with `assets`, every other path serves static files.
pub fn router(state: Shared, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session))
        .route("/api/notes/{id}", get(note))
        .route("/api/codes", get(codes))
        .route("/api/annotations", post(submit))
        .route("/api/report", get(report))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

fn poisoned() -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "service state is unavailable".into())
}

#[derive(Deserialize)]
struct SessionQuery {
    annotator: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SessionState {
    pub annotator_id: String,
    pub completed: usize,
    pub total: usize,
    pub next_note: Option<String>,
}

async fn session(State(s): State<Shared>, Query(q): Query<SessionQuery>) -> Result<Json<SessionState>, ApiError> {
    // existing sessions only need the read lock
    if let Some(sess) = s.read().map_err(|_| poisoned())?.session(&q.annotator) {
        return Ok(Json(state_of(sess)));
    }
    let mut service = s.write().map_err(|_| poisoned())?;
    Ok(Json(state_of(service.session_or_create(&q.annotator)?)))
}

fn state_of(s: &rac_core::annotation::AnnotationSession) -> SessionState {
    SessionState {
        annotator_id: s.annotator_id.clone(),
        completed: s.completed,
        total: s.queue.len(),
        next_note: s.next_note().map(str::to_string),
    }
}

async fn note(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    let service = s.read().map_err(|_| poisoned())?;
    match service.note_text(&id) {
        Some(text) => Ok(Json(json!({ "id": id, "text": text }))),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("no note `{id}`"))),
    }
}

#[derive(Deserialize)]
struct CodeQuery {
    #[serde(default)]
    query: String,
    limit: Option<usize>,
}

const DEFAULT_CODE_LIMIT: usize = 50;

async fn codes(State(s): State<Shared>, Query(q): Query<CodeQuery>) -> Result<impl IntoResponse, ApiError> {
    let service = s.read().map_err(|_| poisoned())?;
    Ok(Json(service.search(&q.query, q.limit.unwrap_or(DEFAULT_CODE_LIMIT))))
}

async fn submit(State(s): State<Shared>, Json(record): Json<AnnotationRecord>) -> Result<impl IntoResponse, ApiError> {
    let mut service = s.write().map_err(|_| poisoned())?;
    Ok(Json(service.submit(record)?))
}

async fn report(State(s): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let service = s.read().map_err(|_| poisoned())?;
    Ok(Json(service.report()?))
}
