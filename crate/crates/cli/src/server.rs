//! Single-session HTTP service. Edits and undo take the session's write
//! lock, so they are serialized; renders share a read lock and see the
//! state as of request start.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use splatfield::camera::CameraView;
use splatfield::error::Error;
use splatfield::session::{view_from_pose, EditRequest, SelectRequest, Session, DEFAULT_VIEW_SIZE};

use crate::{parse_background, pose_string, CliError, CliResult, ServeArgs, EXIT_FAILURE};

pub const SELECTION_COUNT_HEADER: &str = "x-selection-count";

pub struct AppState {
    pub session: RwLock<Session>,
    /// Default `/save` target.
    pub checkpoint: PathBuf,
}

impl AppState {
    pub fn new(session: Session, checkpoint: PathBuf) -> Arc<Self> {
        Arc::new(Self {
            session: RwLock::new(session),
            checkpoint,
        })
    }
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn internal(msg: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` on the blocking pool with the session read-locked.
async fn with_session<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let guard = state.session.read().map_err(internal)?;
        f(&guard)
    })
    .await
    .map_err(internal)?
}

async fn with_session_mut<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&mut Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = state.session.write().map_err(internal)?;
        f(&mut guard)
    })
    .await
    .map_err(internal)?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Debug, Deserialize)]
pub struct ViewQuery {
    pub pose: String,
    pub w: Option<usize>,
    pub h: Option<usize>,
}

impl ViewQuery {
    fn view(&self) -> ApiResult<CameraView> {
        Ok(view_from_pose(
            &self.pose,
            self.w.unwrap_or(DEFAULT_VIEW_SIZE),
            self.h.unwrap_or(DEFAULT_VIEW_SIZE),
        )?)
    }
}

async fn render(State(state): State<Arc<AppState>>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let view = q.view()?;
    with_session(&state, move |s| Ok(s.render_png(&view)?)).await.map(png)
}

async fn feature_viz(State(state): State<Arc<AppState>>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let view = q.view()?;
    with_session(&state, move |s| Ok(s.feature_viz_png(&view)?)).await.map(png)
}

async fn segmentation(State(state): State<Arc<AppState>>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let view = q.view()?;
    with_session(&state, move |s| Ok(s.segmentation_png(&view)?)).await.map(png)
}

async fn labels(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    with_session(&state, |s| Ok(Json(json!({ "labels": s.labels() })))).await
}

#[derive(Debug, Deserialize)]
pub struct OrbitQuery {
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
}

async fn orbit(Query(q): Query<OrbitQuery>) -> ApiResult<Json<serde_json::Value>> {
    let view = CameraView::orbit(q.theta, q.phi, q.r, DEFAULT_VIEW_SIZE, DEFAULT_VIEW_SIZE)?;
    Ok(Json(json!({ "pose": pose_string(&view) })))
}

async fn prompt(State(state): State<Arc<AppState>>, Json(req): Json<SelectRequest>) -> ApiResult<Response> {
    let (count, bytes) = with_session(&state, move |s| {
        let (sel, bytes) = s.prompt(&req)?;
        Ok((sel.count(), bytes))
    })
    .await?;
    let mut resp = png(bytes);
    resp.headers_mut()
        .insert(SELECTION_COUNT_HEADER, HeaderValue::from(count as u64));
    Ok(resp)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EditResponse {
    pub count: usize,
    pub undo_depth: usize,
}

async fn edit(State(state): State<Arc<AppState>>, Json(req): Json<EditRequest>) -> ApiResult<Json<EditResponse>> {
    with_session_mut(&state, move |s| {
        let sel = s.edit(&req)?;
        Ok(Json(EditResponse {
            count: sel.count(),
            undo_depth: s.undo_depth(),
        }))
    })
    .await
}

async fn undo(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    with_session_mut(&state, |s| {
        let undone = s.undo();
        Ok(Json(json!({
            "undone": undone.map(|(op, _)| op.to_string()),
            "count": undone.map_or(0, |(_, n)| n),
            "undo_depth": s.undo_depth(),
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct SaveRequest {
    pub path: Option<PathBuf>,
}

async fn save(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: SaveRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SaveRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let path = req.path.unwrap_or_else(|| state.checkpoint.clone());
    with_session(&state, move |s| {
        let removed = s.save(&path)?;
        Ok(Json(json!({
            "path": path,
            "removed": removed,
            "count": s.working().len() - removed,
        })))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/render", get(render))
        .route("/feature_viz", get(feature_viz))
        .route("/segmentation", get(segmentation))
        .route("/labels", get(labels))
        .route("/orbit", get(orbit))
        .route("/prompt", post(prompt))
        .route("/edit", post(edit))
        .route("/undo", post(undo))
        .route("/save", post(save))
        .with_state(state)
}

pub fn serve(a: &ServeArgs) -> CliResult {
    let mut session = Session::load(&a.checkpoint, a.codebook.as_deref())?;
    session.background = parse_background(&a.bg)?;
    let state = AppState::new(session, a.checkpoint.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError {
            code: EXIT_FAILURE,
            message: format!("cannot start runtime: {e}"),
        })?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state)).await.map_err(|e| CliError {
            code: EXIT_FAILURE,
            message: format!("server error: {e}"),
        })
    })
}
