//! HTTP surface of the ingest backend.
//!
//! | method | path | auth |
//! |---|---|---|
//! | POST | `/v1/register` | study code in the body |
//! | POST | `/v1/chunks` | device token; body is the raw chunk |
//! | GET | `/v1/tasks?since=<ms>` | device token |
//! | POST | `/v1/answers` | device token; body is a JSON array |
//! | GET | `/v1/supervisor/status` | supervisor credential |
//! | GET | `/v1/supervisor/report` | supervisor credential |
//! | POST | `/v1/supervisor/sync/{pseudonym}` | supervisor credential |
//! | DELETE | `/v1/participants/{pseudonym}` | supervisor credential, or the participant's own token |
//! | GET | `/v1/health` | none |
//!
//! Credentials travel in `Authorization`, bare or as `Bearer <token>`.
//! Errors come back as `{"error": "...", "message": "..."}` with the status
//! code of the error kind.

mod client;

pub use client::HttpClient;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use ilog_core::export::compliance_report;
use ilog_core::ingest::{Backend, IngestApi, IngestError, RegisterRequest, SubmittedAnswer};
use ilog_core::study::Pseudonym;
use ilog_core::TsMs;
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Header carrying the caller's clock in epoch milliseconds. Honoured only
/// when the server trusts client clocks, which simulated studies need.
pub const NOW_HEADER: &str = "x-ilog-now";

const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerOptions {
    pub trust_client_clock: bool,
}

#[derive(Clone)]
struct AppState {
    backend: Arc<Backend>,
    opts: ServerOptions,
}

struct ApiError(IngestError);

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.body())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn wall_clock() -> TsMs {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as TsMs)
}

impl AppState {
    fn now(&self, headers: &HeaderMap) -> Result<TsMs, ApiError> {
        match headers.get(NOW_HEADER) {
            Some(v) if self.opts.trust_client_clock => v
                .to_str()
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| IngestError::BadRequest(format!("{NOW_HEADER} must be epoch milliseconds")).into()),
            _ => Ok(wall_clock()),
        }
    }

    /// Runs blocking backend work off the async workers.
    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Backend) -> Result<T, IngestError> + Send + 'static,
    {
        let backend = self.backend.clone();
        tokio::task::spawn_blocking(move || f(&backend))
            .await
            .map_err(|e| IngestError::Internal(e.to_string()))?
            .map_err(ApiError)
    }
}

fn credential(headers: &HeaderMap) -> Result<String, ApiError> {
    let raw = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or(IngestError::Unauthorized)?;
    Ok(raw.strip_prefix("Bearer ").unwrap_or(raw).trim().to_string())
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| IngestError::BadRequest(e.to_string()).into())
}

fn parse_pseudonym(s: &str) -> Result<Pseudonym, ApiError> {
    s.parse().map_err(|_| IngestError::UnknownParticipant.into())
}

async fn register(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let now = st.now(&headers)?;
    let req: RegisterRequest = parse_json(&body)?;
    let resp = st.run(move |b| b.register(&req, now)).await?;
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn upload(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<ilog_core::ingest::UploadReceipt> {
    let now = st.now(&headers)?;
    let token = credential(&headers)?;
    Ok(Json(st.run(move |b| b.upload_chunk(&token, &body, now)).await?))
}

#[derive(Deserialize)]
struct TasksQuery {
    since: Option<TsMs>,
}

async fn tasks(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<TasksQuery>,
) -> ApiResult<ilog_core::ingest::TaskFeed> {
    let now = st.now(&headers)?;
    let token = credential(&headers)?;
    Ok(Json(st.run(move |b| b.fetch_tasks(&token, q.since, now)).await?))
}

async fn answers(
    State(st): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Vec<ilog_core::ingest::AnswerStatus>> {
    let now = st.now(&headers)?;
    let token = credential(&headers)?;
    let items: Vec<SubmittedAnswer> = parse_json(&body)?;
    Ok(Json(st.run(move |b| b.submit_answers(&token, &items, now)).await?))
}

async fn status(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<ilog_core::ingest::SupervisorStatus> {
    let now = st.now(&headers)?;
    let cred = credential(&headers)?;
    Ok(Json(st.run(move |b| b.supervisor_status(&cred, now)).await?))
}

async fn report(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<ilog_core::export::ComplianceReport> {
    let cred = credential(&headers)?;
    Ok(Json(
        st.run(move |b| {
            b.check_supervisor(&cred)?;
            Ok(compliance_report(b.store(), b.diary(), b.config(), b.registered().len() as u64))
        })
        .await?,
    ))
}

async fn sync(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(p): Path<String>,
) -> ApiResult<ilog_core::ingest::SyncCommand> {
    let now = st.now(&headers)?;
    let cred = credential(&headers)?;
    let p = parse_pseudonym(&p)?;
    Ok(Json(st.run(move |b| b.trigger_sync(&cred, p, now)).await?))
}

async fn erase(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(p): Path<String>,
) -> ApiResult<ilog_core::ingest::ErasureReport> {
    let now = st.now(&headers)?;
    let cred = credential(&headers)?;
    let p = parse_pseudonym(&p)?;
    Ok(Json(
        st.run(move |b| {
            if b.check_supervisor(&cred).is_ok() {
                b.erase_participant(&cred, p, now)
            } else if b.pseudonym_of(&cred) == Some(p) {
                b.erase_self(&cred, now)
            } else {
                Err(IngestError::Unauthorized)
            }
        })
        .await?,
    ))
}

async fn health() -> &'static str {
    "ok"
}

async fn fallback() -> ApiError {
    ApiError(IngestError::BadRequest("no such endpoint".into()))
}

pub fn router(backend: Arc<Backend>, opts: ServerOptions) -> Router {
    Router::new()
        .route("/v1/register", post(register))
        .route("/v1/chunks", post(upload))
        .route("/v1/tasks", get(tasks))
        .route("/v1/answers", post(answers))
        .route("/v1/supervisor/status", get(status))
        .route("/v1/supervisor/report", get(report))
        .route("/v1/supervisor/sync/{pseudonym}", post(sync))
        .route("/v1/participants/{pseudonym}", delete(erase))
        .route("/v1/health", get(health))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(AppState { backend, opts })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    backend: Arc<Backend>,
    opts: ServerOptions,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(backend, opts)).with_graceful_shutdown(shutdown).await
}

/// A server on its own runtime thread, stopped on drop.
pub struct RunningServer {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free one) and serves on a background thread.
pub fn spawn(backend: Arc<Backend>, opts: ServerOptions, addr: &str) -> std::io::Result<RunningServer> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let bound = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(serve(listener, backend, opts, async {
            let _ = rx.await;
        }))
    });
    Ok(RunningServer {
        addr: bound,
        stop: Some(tx),
        thread: Some(thread),
    })
}
