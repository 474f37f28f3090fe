use std::collections::HashMap;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::convert::DatasetFormat;
use crate::eval::MatrixLevel;
use crate::scheduler::InstanceConfig;
use crate::store::VersionId;

use super::platform::{AddUtteranceRequest, EditRequest, ImportRequest, Platform, SubmitJobRequest};
use super::{ApiError, ErrorCode};

type Shared = State<Arc<Platform>>;
type Params = Query<HashMap<String, String>>;

/// Runs a platform call off the async executor. Platform calls block on
/// disk and on worker HTTP requests.
async fn blocking<T, F>(status: StatusCode, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => (status, Json(v)).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(ErrorCode::Internal, format!("handler panicked: {e}")).into_response(),
    }
}

async fn blocking_bytes<F>(f: F) -> Response
where
    F: FnOnce() -> Result<Vec<u8>, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(ErrorCode::Internal, format!("handler panicked: {e}")).into_response(),
    }
}

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

fn param<T: FromStr>(q: &HashMap<String, String>, name: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    q.get(name)
        .map(|raw| raw.parse().map_err(|e| ApiError::invalid(format!("bad query parameter {name}={raw:?}: {e}"))))
        .transpose()
}

fn required<T: FromStr>(q: &HashMap<String, String>, name: &str) -> Result<T, ApiError>
where
    T::Err: std::fmt::Display,
{
    param(q, name)?.ok_or_else(|| ApiError::invalid(format!("missing query parameter {name}")))
}

// -- datasets ---------------------------------------------------------------

async fn import_dataset(State(p): Shared, raw: Bytes) -> Response {
    blocking(StatusCode::CREATED, move || p.import_dataset(body::<ImportRequest>(&raw)?)).await
}

async fn list_datasets(State(p): Shared) -> Response {
    blocking(StatusCode::OK, move || p.list_datasets()).await
}

async fn get_dataset(State(p): Shared, Path(id): Path<String>, Query(q): Params) -> Response {
    blocking(StatusCode::OK, move || p.get_dataset(&id, param(&q, "version")?)).await
}

async fn export_dataset(State(p): Shared, Path(id): Path<String>, Query(q): Params) -> Response {
    blocking_bytes(move || {
        let format: DatasetFormat = required(&q, "format")?;
        p.export_dataset(&id, param(&q, "version")?, format)
    })
    .await
}

async fn edit_utterance(State(p): Shared, Path((id, uid)): Path<(String, String)>, raw: Bytes) -> Response {
    blocking(StatusCode::OK, move || p.edit_utterance(&id, &uid, body::<EditRequest>(&raw)?)).await
}

async fn add_utterance(State(p): Shared, Path(id): Path<String>, raw: Bytes) -> Response {
    blocking(StatusCode::CREATED, move || p.add_utterance(&id, body::<AddUtteranceRequest>(&raw)?)).await
}

async fn validate_dataset(State(p): Shared, Path(id): Path<String>, Query(q): Params) -> Response {
    blocking(StatusCode::OK, move || p.validate_dataset(&id, param(&q, "version")?)).await
}

// -- jobs -------------------------------------------------------------------

async fn submit_job(State(p): Shared, raw: Bytes) -> Response {
    blocking(StatusCode::CREATED, move || p.submit_job(body::<SubmitJobRequest>(&raw)?)).await
}

async fn list_jobs(State(p): Shared) -> Response {
    blocking(StatusCode::OK, move || Ok(p.list_jobs())).await
}

async fn get_job(State(p): Shared, Path(id): Path<String>) -> Response {
    blocking(StatusCode::OK, move || p.get_job(&id)).await
}

async fn cancel_job(State(p): Shared, Path(id): Path<String>) -> Response {
    blocking(StatusCode::OK, move || p.cancel_job(&id)).await
}

// -- reports ----------------------------------------------------------------

async fn get_report(State(p): Shared, Path(key): Path<String>) -> Response {
    blocking(StatusCode::OK, move || p.get_report(&key)).await
}

async fn get_confusion(State(p): Shared, Path(key): Path<String>, Query(q): Params) -> Response {
    blocking(StatusCode::OK, move || {
        let level: MatrixLevel = required(&q, "level")?;
        p.confusion(&key, level)
    })
    .await
}

async fn get_cell(State(p): Shared, Path(key): Path<String>, Query(q): Params) -> Response {
    blocking(StatusCode::OK, move || {
        let level: MatrixLevel = required(&q, "level")?;
        let gold: String = required(&q, "gold")?;
        let pred: String = required(&q, "pred")?;
        let limit: Option<usize> = param(&q, "limit")?;
        p.confusion_cell(&key, level, &gold, &pred, q.get("cursor").map(String::as_str), limit)
    })
    .await
}

// -- instances --------------------------------------------------------------

async fn list_instances(State(p): Shared) -> Response {
    blocking(StatusCode::OK, move || Ok(p.list_instances())).await
}

async fn create_instance(State(p): Shared, raw: Bytes) -> Response {
    blocking(StatusCode::CREATED, move || {
        let config = if raw.iter().all(u8::is_ascii_whitespace) {
            InstanceConfig::default()
        } else {
            body::<InstanceConfig>(&raw)?
        };
        p.create_instance(config)
    })
    .await
}

async fn stop_instance(State(p): Shared, Path(id): Path<String>) -> Response {
    blocking(StatusCode::OK, move || p.stop_instance(&id)).await
}

// -- models -----------------------------------------------------------------

async fn list_models(State(p): Shared) -> Response {
    blocking(StatusCode::OK, move || p.list_models()).await
}

async fn download_model(State(p): Shared, Path(name): Path<String>, Query(q): Params) -> Response {
    blocking_bytes(move || {
        let version = q.get("version").map(|v| VersionId::from(v.as_str()));
        p.download_model(&name, version.as_ref())
    })
    .await
}

async fn healthz(State(p): Shared) -> Response {
    Json(p.health()).into_response()
}

async fn fallback() -> Response {
    ApiError::not_found("no such route").into_response()
}

/// All routes under `/api/v1`.
pub fn router(platform: Arc<Platform>) -> Router {
    let api = Router::new()
        .route("/datasets", post(import_dataset).get(list_datasets))
        .route("/datasets/:id", get(get_dataset))
        .route("/datasets/:id/export", get(export_dataset))
        .route("/datasets/:id/validate", post(validate_dataset))
        .route("/datasets/:id/utterances", post(add_utterance))
        .route("/datasets/:id/utterances/:uid", patch(edit_utterance))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/:id", get(get_job))
        .route("/jobs/:id/cancel", post(cancel_job))
        .route("/reports/:key", get(get_report))
        .route("/reports/:key/confusion", get(get_confusion))
        .route("/reports/:key/confusion/cell", get(get_cell))
        .route("/instances", get(list_instances).post(create_instance))
        .route("/instances/:id", axum::routing::delete(stop_instance))
        .route("/models", get(list_models))
        .route("/models/:name/download", get(download_model))
        .route("/healthz", get(healthz));
    Router::new().nest("/api/v1", api).fallback(fallback).with_state(platform)
}

/// A gateway server on its own runtime thread, with the scheduler ticking
/// in the background. Dropping the handle shuts both down.
pub struct Gateway {
    pub addr: SocketAddr,
    pub platform: Arc<Platform>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    _ticker: super::Ticker,
}

impl Gateway {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(platform: Arc<Platform>, addr: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let bound = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(Arc::clone(&platform));
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        let ticker = platform.start_ticker();
        Ok(Gateway {
            addr: bound,
            platform,
            shutdown: Some(tx),
            thread: Some(thread),
            _ticker: ticker,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until SIGINT or SIGTERM, then shuts down.
    pub fn wait_for_signal(mut self) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
        rt.block_on(shutdown_signal());
        self.shutdown_now();
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
