//! HTTP/JSON front end for enhancement sessions.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions?abn=true` | multipart image upload, returns `{id, abn_report, initial_score}` |
//! | GET | `/sessions/{id}` | session state |
//! | PATCH | `/sessions/{id}/params` | `{"set":{"sat":0.2},"fix":["sat"],"unfix":[],"gamma":0.1}` |
//! | POST | `/sessions/{id}/optimize` | `{"steps":50}`, 202 and events on the stream |
//! | POST | `/sessions/{id}/stop` | stop at the next iteration boundary |
//! | GET | `/sessions/{id}/render` | full-resolution PNG |
//! | GET | `/sessions/{id}/events` | server-sent events, one JSON object each |
//! | GET | `/sessions/{id}/previews/{n}` | working-resolution PNG announced by an event |
//! | POST | `/sessions/{id}/persist` | `{"name":"dir"}` below the data directory |
//! | POST | `/sessions/load` | `{"name":"dir"}` |

mod events;
mod handle;

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::Stream;
use photoloop_core::api::{
    CreatedSession, ErrorBody, OptimizeRequest, ParamsPatch, PersistRequest, SessionEvent, SessionState,
};
use photoloop_core::session::{Session, SessionOptions};
use photoloop_core::Error;
use serde::Deserialize;

pub use events::EventQueue;
pub use handle::SessionHandle;

const MAX_UPLOAD: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Root for persist/load; requests name a directory directly below it.
    pub data_dir: PathBuf,
    pub defaults: SessionOptions,
    /// Previews retained per session.
    pub preview_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("sessions"),
            defaults: SessionOptions::default(),
            preview_capacity: 32,
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    fn lookup(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.session(id).ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    fn data_path(&self, name: &str) -> Result<PathBuf, ApiError> {
        let mut parts = FsPath::new(name).components();
        match (parts.next(), parts.next()) {
            (Some(Component::Normal(_)), None) => Ok(self.config.data_dir.join(name)),
            _ => Err(ApiError::BadRequest(format!("invalid session directory name `{name}`"))),
        }
    }
}

#[derive(Debug)]
pub enum ApiError {
    Core(Error),
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::Core(e) => {
                let status = match &e {
                    Error::Busy | Error::InvalidState(_) => StatusCode::CONFLICT,
                    Error::UnsupportedImage(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
                    Error::Schema(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
                    Error::EmptyInput
                    | Error::ParameterOutOfBounds { .. }
                    | Error::UnknownFilter(_)
                    | Error::InvalidConfig(_)
                    | Error::InvalidDimensions(_)
                    | Error::DimensionMismatch(..) => StatusCode::BAD_REQUEST,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.to_string())
            }
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(ErrorBody { error: msg })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/load", post(load_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/params", patch(set_params))
        .route("/sessions/{id}/optimize", post(optimize))
        .route("/sessions/{id}/stop", post(stop))
        .route("/sessions/{id}/render", get(render))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/previews/{n}", get(preview))
        .route("/sessions/{id}/persist", post(persist))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(config))).with_graceful_shutdown(shutdown).await
}

#[derive(Deserialize)]
struct CreateQuery {
    abn: Option<bool>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Query(q): Query<CreateQuery>,
    mut multipart: Multipart,
) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::BadRequest(e.to_string()))? {
        if field.name().is_none_or(|n| n == "image") {
            bytes = Some(field.bytes().await.map_err(|e| ApiError::BadRequest(e.to_string()))?);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::BadRequest("multipart field `image` missing".into()))?;
    let mut options = state.config.defaults.clone();
    if let Some(abn) = q.abn {
        options.abn = abn;
    }
    let preview_capacity = state.config.preview_capacity;
    let handle = blocking(move || {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::create(id, &bytes, options)?;
        Ok(SessionHandle::new(session, preview_capacity))
    })
    .await?;
    let view = handle.state();
    let created = CreatedSession {
        id: view.id.clone(),
        abn_report: view.abn_report.clone(),
        initial_score: view.history.first().map_or(f64::NAN, |r| r.mean_score),
    };
    tracing::info!(session = %created.id, "created");
    state.sessions.write().unwrap().insert(created.id.clone(), Arc::new(handle));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    Ok(Json(state.lookup(&id)?.state()))
}

async fn set_params(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(patch): Json<ParamsPatch>,
) -> ApiResult<Json<SessionState>> {
    let handle = state.lookup(&id)?;
    let edit = patch.to_edit()?;
    blocking(move || Ok(Json(handle.set_params(edit)?))).await
}

async fn optimize(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<OptimizeRequest>>,
) -> ApiResult<impl IntoResponse> {
    let handle = state.lookup(&id)?;
    let steps = body.and_then(|Json(b)| b.steps);
    let accepted = handle.begin_optimize(steps)?;
    let runner = handle.clone();
    let n = accepted.steps;
    tokio::task::spawn_blocking(move || {
        if let Err(e) = runner.run(n) {
            tracing::warn!(session = %runner.id(), "optimisation failed: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(accepted)))
}

async fn stop(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let handle = state.lookup(&id)?;
    handle.stop();
    Ok(Json(handle.state()))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn render(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = state.lookup(&id)?;
    blocking(move || Ok(png(handle.render()?))).await
}

async fn preview(State(state): State<Arc<AppState>>, Path((id, n)): Path<(String, u64)>) -> ApiResult<Response> {
    let handle = state.lookup(&id)?;
    handle
        .preview(n)
        .map(png)
        .ok_or_else(|| ApiError::NotFound(format!("preview {n} not retained")))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

fn sse_event(ev: &SessionEvent) -> Event {
    let json = serde_json::to_value(ev).unwrap_or_default();
    let name = json.get("type").and_then(|t| t.as_str()).unwrap_or("event").to_string();
    Event::default().id(ev.seq.to_string()).event(name).data(json.to_string())
}

/// Replays retained events after `?after=` (or `Last-Event-ID`), then
/// follows the live queue.
async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let handle = state.lookup(&id)?;
    let after = q.after.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let rx = handle.events.subscribe();
    let buffer = std::collections::VecDeque::new();
    let stream = futures::stream::unfold(
        (handle, after.unwrap_or(0), rx, buffer),
        |(handle, mut cursor, mut rx, mut buffer)| async move {
            loop {
                if let Some(ev) = buffer.pop_front() {
                    let ev: SessionEvent = ev;
                    cursor = ev.seq;
                    return Some((Ok(sse_event(&ev)), (handle, cursor, rx, buffer)));
                }
                let fresh = handle.events.since(cursor);
                if !fresh.is_empty() {
                    buffer.extend(fresh);
                    continue;
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn persist(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PersistRequest>,
) -> ApiResult<StatusCode> {
    let handle = state.lookup(&id)?;
    let dir = state.data_path(&req.name)?;
    blocking(move || Ok(handle.persist(&dir)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn load_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<PersistRequest>,
) -> ApiResult<(StatusCode, Json<SessionState>)> {
    let dir = state.data_path(&req.name)?;
    let preview_capacity = state.config.preview_capacity;
    let handle = blocking(move || Ok(SessionHandle::new(Session::load(&dir)?, preview_capacity))).await?;
    let view = handle.state();
    let mut sessions = state.sessions.write().unwrap();
    if sessions.contains_key(&view.id) {
        return Err(ApiError::Conflict(format!("session {} is already loaded", view.id)));
    }
    sessions.insert(view.id.clone(), Arc::new(handle));
    Ok((StatusCode::CREATED, Json(view)))
}
