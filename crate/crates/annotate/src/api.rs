//! HTTP API over the annotation store, plus static hosting for the UI.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use navkit_core::action::{Action, BBox};
use navkit_core::eval::GoldChoice;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::store::{
    verified_choices, AnnotateError, EpisodeState, Judgment, Lease, Review, Status, Store, Verdict,
};

const PLACEHOLDER_UI: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>navkit annotate</title></head>\n<body><h1>navkit annotate</h1><p>No UI bundle configured. The JSON API is served under <code>/api</code>.</p></body></html>\n";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub token: Option<String>,
    pub exports_dir: PathBuf,
}

impl AppState {
    pub fn new(store: Arc<Store>) -> Self {
        let exports_dir = store.data_dir().join("exports");
        AppState {
            store,
            token: None,
            exports_dir,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }
}

pub struct ApiError(AnnotateError);

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use AnnotateError::*;
        let status = match &self.0 {
            UnknownEpisode(_) | UnknownStep { .. } => StatusCode::NOT_FOUND,
            OutOfOrder { .. }
            | AlreadyTruncated { .. }
            | AlreadyComplete
            | DuplicateChoice { .. }
            | StepNotVerified { .. }
            | LeaseConflict { .. }
            | AlreadyReviewed { .. }
            | NotFlagged { .. }
            | NothingToExport => StatusCode::CONFLICT,
            LeaseRequired { .. } | SameAnnotator { .. } => StatusCode::FORBIDDEN,
            MissingBBox { .. }
            | BBoxExcludesClick { .. }
            | MissingCorrection { .. }
            | UnexpectedCorrection { .. }
            | InvalidRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Io { .. } | Corrupt { .. } | Dataset(_) | BatchMismatch { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = json!({"error": self.0.code(), "message": self.0.to_string()});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a store call off the async workers; writes fsync.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Store) -> Result<T, AnnotateError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .expect("store task panicked")
        .map_err(ApiError)
}

#[derive(Debug, Serialize)]
struct EpisodeSummary {
    id: String,
    app: String,
    instruction: String,
    steps: u32,
    status: Status,
    cursor: u32,
    truncated_at: Option<u32>,
    lease: Option<Lease>,
    flagged: Vec<u32>,
}

async fn list_episodes(State(app): State<AppState>) -> Json<Vec<EpisodeSummary>> {
    let snapshot = app.store.snapshot();
    Json(
        app.store
            .episodes()
            .iter()
            .map(|e| {
                let s = &snapshot[&e.id];
                EpisodeSummary {
                    id: e.id.clone(),
                    app: e.app.clone(),
                    instruction: e.instruction.clone(),
                    steps: s.steps,
                    status: s.status,
                    cursor: s.cursor,
                    truncated_at: s.truncated_at,
                    lease: s.lease.clone(),
                    flagged: s.flagged.iter().copied().collect(),
                }
            })
            .collect(),
    )
}

async fn get_episode(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let episode = app.store.episode(&id)?;
    let state = app.store.state(&id)?;
    Ok(Json(json!({"episode": episode, "state": state})).into_response())
}

#[derive(Debug, Deserialize)]
struct AnnotatorBody {
    annotator: String,
}

async fn claim(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<AnnotatorBody>,
) -> ApiResult<Lease> {
    blocking(&app, move |s| s.claim(&id, &body.annotator)).await.map(Json)
}

async fn release(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<AnnotatorBody>,
) -> Result<StatusCode, ApiError> {
    blocking(&app, move |s| s.release(&id, &body.annotator)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Serialize)]
struct StepView {
    episode: String,
    index: u32,
    screenshot_url: String,
    width: Option<u32>,
    height: Option<u32>,
    proposed_action: Action,
    verdict: Option<Verdict>,
    gold_choices: Option<Vec<GoldChoice>>,
}

async fn get_step(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, u32)>,
) -> ApiResult<StepView> {
    let step = app.store.step(&id, n)?;
    let state = app.store.state(&id)?;
    let dims = image_dims(&app, &id, n);
    Ok(Json(StepView {
        episode: id.clone(),
        index: n,
        screenshot_url: format!("/api/episodes/{id}/steps/{n}/screenshot"),
        width: dims.map(|d| d.0),
        height: dims.map(|d| d.1),
        proposed_action: step.primary_action.clone(),
        verdict: state.verdict(n).cloned(),
        gold_choices: verified_choices(step, &state),
    }))
}

fn image_dims(app: &AppState, id: &str, n: u32) -> Option<(u32, u32)> {
    let step = app.store.step(id, n).ok()?;
    let ep = app.store.episode(id).ok()?;
    navkit_core::dataset::resolve_screenshot(app.store.image_root(), ep, step)
        .ok()
        .map(|r| (r.width, r.height))
}

async fn get_screenshot(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, u32)>,
) -> Result<Response, ApiError> {
    let step = app.store.step(&id, n)?;
    let path = app.store.image_root().join(&step.screenshot);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| AnnotateError::Io { path: path.clone(), source: e })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    step: u32,
    judgment: Judgment,
    #[serde(default)]
    bbox: Option<BBox>,
    #[serde(default)]
    corrected_action: Option<Action>,
    #[serde(default)]
    alternatives: Vec<GoldChoice>,
    annotator: String,
}

async fn submit_verdict(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<VerdictBody>,
) -> ApiResult<EpisodeState> {
    let verdict = Verdict {
        step: b.step,
        judgment: b.judgment,
        bbox: b.bbox,
        corrected_action: b.corrected_action,
        alternatives: b.alternatives,
        annotator: b.annotator,
        timestamp_ms: 0,
    };
    blocking(&app, move |s| s.submit_verdict(&id, verdict)).await.map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlternativeBody {
    choice: GoldChoice,
    annotator: String,
}

async fn add_alternative(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, u32)>,
    Json(b): Json<AlternativeBody>,
) -> ApiResult<Vec<GoldChoice>> {
    blocking(&app, move |s| s.add_alternative(&id, n, b.choice, &b.annotator))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    judgment: Judgment,
    #[serde(default)]
    corrected_action: Option<Action>,
    annotator: String,
}

async fn submit_review(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, u32)>,
    Json(b): Json<ReviewBody>,
) -> ApiResult<EpisodeState> {
    let review = Review {
        step: n,
        judgment: b.judgment,
        corrected_action: b.corrected_action,
        annotator: b.annotator,
        timestamp_ms: 0,
    };
    blocking(&app, move |s| s.submit_review(&id, review)).await.map(Json)
}

async fn resolve_flag(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, u32)>,
    Json(b): Json<AnnotatorBody>,
) -> ApiResult<EpisodeState> {
    blocking(&app, move |s| s.resolve_flag(&id, n, &b.annotator)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    annotator: String,
}

async fn review_queue(
    State(app): State<AppState>,
    Query(q): Query<QueueQuery>,
) -> Json<Vec<crate::store::ReviewItem>> {
    Json(app.store.review_queue(&q.annotator))
}

fn default_statuses() -> Vec<Status> {
    vec![Status::Complete, Status::Truncated]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportBody {
    #[serde(default = "default_statuses")]
    statuses: Vec<Status>,
    /// Subdirectory of the exports dir.
    name: String,
}

async fn export(State(app): State<AppState>, Json(b): Json<ExportBody>) -> Result<Response, ApiError> {
    let name_ok = !b.name.is_empty()
        && b.name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !b.name.starts_with('.');
    if !name_ok {
        return Err(AnnotateError::InvalidRequest(format!("bad export name `{}`", b.name)).into());
    }
    let out = app.exports_dir.join(&b.name);
    let summary = blocking(&app, move |s| s.export(&b.statuses, &out)).await?;
    Ok(Json(summary).into_response())
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let expected = format!("Bearer {token}");
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .is_some_and(|v| v == HeaderValue::from_str(&expected).unwrap_or(HeaderValue::from_static("")));
        if !ok {
            return (
                StatusCode::UNAUTHORIZED,
                Json(json!({"error": "unauthorized", "message": "missing or wrong bearer token"})),
            )
                .into_response();
        }
    }
    next.run(req).await
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_UI)
}

/// API routes under `/api`, UI bundle under `/ui`.
pub fn router(app: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({"ok": true})) }))
        .route("/episodes", get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/claim", post(claim))
        .route("/episodes/{id}/release", post(release))
        .route("/episodes/{id}/verdicts", post(submit_verdict))
        .route("/episodes/{id}/steps/{n}", get(get_step))
        .route("/episodes/{id}/steps/{n}/screenshot", get(get_screenshot))
        .route("/episodes/{id}/steps/{n}/alternatives", post(add_alternative))
        .route("/episodes/{id}/steps/{n}/review", post(submit_review))
        .route("/episodes/{id}/steps/{n}/resolve", post(resolve_flag))
        .route("/reviews", get(review_queue))
        .route("/export", post(export))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app);

    let base = Router::new()
        .nest("/api", api)
        .route("/", get(|| async { Redirect::temporary("/ui/") }));
    let base = match ui_dir {
        Some(dir) if dir.is_dir() => {
            base.nest_service("/ui", ServeDir::new(&dir).append_index_html_on_directories(true))
        }
        _ => base
            .route("/ui", get(placeholder))
            .route("/ui/", get(placeholder))
            .route("/ui/{*rest}", get(placeholder)),
    };
    base.fallback(|| async { (StatusCode::NOT_FOUND, Body::from("not found")) })
}

/// Serves until `shutdown` resolves. Every write is already fsynced, so
/// shutdown only has to drain in-flight requests.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
