//! HTTP JSON API over a review session.
//!
//! Reads take the session lock briefly; every verdict is persisted before the
//! response is sent.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use protopart_core::data::manifest::class_name;
use protopart_core::review::{SessionStore, Verdict, HINTS};
use protopart_core::Error;

pub struct AppState {
    pub store: Mutex<SessionStore>,
    pub allow_partial: bool,
}

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, SessionStore> {
    state.store.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProgressView {
    pub class: usize,
    pub name: String,
    pub valid: usize,
    pub discard: usize,
    pub pending: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub checkpoint: String,
    pub created_at: u64,
    pub num_prototypes: usize,
    pub pending: usize,
    pub export_ready: bool,
    pub progress: Vec<ProgressView>,
    pub hints: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrototypeView {
    pub id: usize,
    pub class: usize,
    pub class_name: String,
    pub image: String,
    pub bbox: [usize; 4],
    pub verdict: Verdict,
    pub note: String,
    pub patch_url: String,
    pub context_url: String,
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    verdict: String,
    #[serde(default)]
    note: String,
}

#[derive(Debug, Default, Deserialize)]
struct ExportBody {
    #[serde(default)]
    allow_partial: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportView {
    pub path: String,
    pub entries: usize,
    pub per_class: Vec<usize>,
    pub warnings: Vec<String>,
}

async fn session(State(state): State<Arc<AppState>>) -> Json<SessionView> {
    let store = lock(&state);
    let s = store.session();
    let pending = store.pending();
    let progress = store
        .progress()
        .into_iter()
        .enumerate()
        .map(|(c, p)| ProgressView {
            class: c,
            name: class_name(c),
            valid: p.valid,
            discard: p.discard,
            pending: p.pending,
        })
        .collect();
    Json(SessionView {
        checkpoint: s.checkpoint.clone(),
        created_at: s.created_at,
        num_prototypes: s.roster.len(),
        pending,
        export_ready: pending == 0 || state.allow_partial,
        progress,
        hints: HINTS.iter().map(|h| h.to_string()).collect(),
    })
}

async fn prototypes(State(state): State<Arc<AppState>>) -> Json<Vec<PrototypeView>> {
    let store = lock(&state);
    let views = store
        .session()
        .roster
        .iter()
        .map(|e| PrototypeView {
            id: e.id,
            class: e.class,
            class_name: class_name(e.class),
            image: e.image.clone(),
            bbox: e.bbox,
            verdict: e.verdict,
            note: e.note.clone(),
            patch_url: format!("/api/prototypes/{}/patch.png", e.id),
            context_url: format!("/api/prototypes/{}/context.png", e.id),
        })
        .collect();
    Json(views)
}

fn parse_id(raw: &str) -> ApiResult<usize> {
    raw.parse()
        .map_err(|_| ApiError(Error::NotFound(format!("prototype `{raw}`"))))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn patch(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let store = lock(&state);
    store.entry(id)?;
    Ok(png(store.patch_png(id)?))
}

async fn context(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let store = lock(&state);
    store.entry(id)?;
    Ok(png(store.context_png(id)?))
}

async fn verdict(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let body: VerdictBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError(Error::Validation(vec![format!("bad verdict body: {e}")])))?;
    let v: Verdict = body.verdict.parse()?;
    if v == Verdict::Pending {
        return Err(ApiError(Error::Validation(vec![
            "verdict must be \"valid\" or \"discard\"".into(),
        ])));
    }
    let entry = lock(&state).set_verdict(id, v, &body.note)?;
    Ok(Json(entry).into_response())
}

async fn export(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ExportView>> {
    let req: ExportBody = if body.iter().all(|b| b.is_ascii_whitespace()) {
        ExportBody::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError(Error::Validation(vec![format!("bad export body: {e}")])))?
    };
    let out = lock(&state).export(req.allow_partial || state.allow_partial)?;
    Ok(Json(ExportView {
        path: out.path.display().to_string(),
        entries: out.set.entries.len(),
        per_class: out.per_class,
        warnings: out.warnings,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/prototypes", get(prototypes))
        .route("/api/prototypes/{id}/patch.png", get(patch))
        .route("/api/prototypes/{id}/context.png", get(context))
        .route("/api/prototypes/{id}/verdict", post(verdict))
        .route("/api/export", post(export))
        .with_state(state)
}

pub fn app(store: SessionStore, allow_partial: bool) -> Router {
    router(Arc::new(AppState { store: Mutex::new(store), allow_partial }))
}

/// Serves until the process is stopped.
pub async fn serve(store: SessionStore, addr: SocketAddr, allow_partial: bool) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(store, allow_partial)).await
}
