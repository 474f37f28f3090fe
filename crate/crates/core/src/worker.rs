//! The per-instance worker: accepts train/test/grid-search jobs into a fixed
//! number of slots, runs them off the request path and keeps their results
//! and logs for polling.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_corpus, load_model, save_report, ArtifactError, ArtifactRef, ReportBundle};
use crate::eval::EvaluationReport;
use crate::ir::Split;
use crate::models::{evaluate_split, grid_search, train_joint, Grid, GridResult, Hyperparams, JointModel, Metric, ModelError};
use crate::store::{ObjectKey, ObjectStore, VersionId};

/// Lines kept in `JobResult::log_tail`.
pub const LOG_TAIL_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Test,
    GridSearch,
}

impl std::fmt::Display for JobKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JobKind::Train => "train",
            JobKind::Test => "test",
            JobKind::GridSearch => "grid_search",
        })
    }
}

/// A corpus id, optionally pinned to a version (latest otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSelector {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
}

/// A model name under `models/`, optionally pinned to a version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSelector {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<VersionId>,
}

/// One unit of work. For train and grid-search jobs `model` names the output
/// (defaulting to the corpus id); for test jobs it is the pinned input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub job_id: String,
    pub kind: JobKind,
    pub corpus: CorpusSelector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSelector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub metric: Metric,
    /// More than one seed trains one model per seed and keeps the median.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    /// Split scored by a test job; defaults to `test`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Team tag matched against reserved instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub team: Option<String>,
}

impl JobSpec {
    pub fn train(job_id: impl Into<String>, corpus_id: impl Into<String>, hyper: Hyperparams) -> Self {
        JobSpec {
            job_id: job_id.into(),
            kind: JobKind::Train,
            corpus: CorpusSelector {
                id: corpus_id.into(),
                version: None,
            },
            model: None,
            hyper: Some(hyper),
            grid: None,
            metric: Metric::default(),
            seeds: Vec::new(),
            split: None,
            team: None,
        }
    }

    pub fn test(job_id: impl Into<String>, corpus_id: impl Into<String>, model_name: impl Into<String>, model_version: VersionId) -> Self {
        JobSpec {
            kind: JobKind::Test,
            model: Some(ModelSelector {
                name: model_name.into(),
                version: Some(model_version),
            }),
            hyper: None,
            ..JobSpec::train(job_id, corpus_id, Hyperparams::default())
        }
    }

    pub fn grid_search(job_id: impl Into<String>, corpus_id: impl Into<String>, grid: Grid, metric: Metric) -> Self {
        JobSpec {
            kind: JobKind::GridSearch,
            grid: Some(grid),
            metric,
            hyper: None,
            ..JobSpec::train(job_id, corpus_id, Hyperparams::default())
        }
    }

    /// Checks the kind-dependent required fields.
    pub fn validate(&self) -> Result<(), String> {
        ObjectKey::report(self.job_id.as_str()).map_err(|_| format!("invalid job id {:?}", self.job_id))?;
        if self.job_id.contains('/') {
            return Err(format!("invalid job id {:?}", self.job_id));
        }
        ObjectKey::dataset(self.corpus.id.as_str()).map_err(|_| format!("invalid corpus id {:?}", self.corpus.id))?;
        if let Some(m) = &self.model {
            ObjectKey::model(m.name.as_str()).map_err(|_| format!("invalid model name {:?}", m.name))?;
        }
        match self.kind {
            JobKind::Test => match &self.model {
                Some(ModelSelector { version: Some(_), .. }) => Ok(()),
                _ => Err("a test job needs a model name and version".into()),
            },
            JobKind::Train if self.hyper.is_none() => Err("a train job needs hyperparameters".into()),
            JobKind::Train => Ok(()),
            JobKind::GridSearch => match &self.grid {
                Some(g) if !g.is_empty() => Ok(()),
                _ => Err("a grid-search job needs a non-empty grid".into()),
            },
        }
    }

    /// Name under `models/` a train or grid-search job writes to.
    pub fn output_model_name(&self) -> String {
        self.model.as_ref().map_or_else(|| self.corpus.id.clone(), |m| m.name.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub instance_id: String,
    pub busy: bool,
    pub running_job: Option<String>,
    pub capacity_slots: usize,
    pub used_slots: usize,
    pub uptime_s: f64,
    pub queue_accepting: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ArtifactRef>,
    /// Dev-split scores of the stored model (train and grid-search jobs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_report: Option<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_scores: Vec<SeedScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub log_tail: Vec<String>,
}

impl JobResult {
    fn empty(job_id: &str) -> Self {
        JobResult {
            job_id: job_id.to_string(),
            status: JobStatus::Succeeded,
            model: None,
            report: None,
            dev_report: None,
            seed_scores: Vec::new(),
            seed_mean: None,
            grid: None,
            error: None,
            wall_time_s: 0.0,
            log_tail: Vec::new(),
        }
    }

    pub fn failed(job_id: &str, error: impl Into<String>) -> Self {
        JobResult {
            status: JobStatus::Failed,
            error: Some(error.into()),
            ..JobResult::empty(job_id)
        }
    }
}

/// Append-only job log shared between the runner and readers.
#[derive(Debug, Clone, Default)]
pub struct JobLog(Arc<Mutex<Vec<String>>>);

impl JobLog {
    pub fn line(&self, line: impl Into<String>) {
        self.0.lock().unwrap().push(line.into());
    }

    pub fn lines(&self) -> Vec<String> {
        self.0.lock().unwrap().clone()
    }

    pub fn tail(&self, n: usize) -> Vec<String> {
        let lines = self.0.lock().unwrap();
        lines[lines.len().saturating_sub(n)..].to_vec()
    }
}

// ---------------------------------------------------------------------------
// Job execution

fn median_index(scores: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order[(order.len() - 1) / 2]
}

fn store_model(store: &dyn ObjectStore, spec: &JobSpec, model: &JointModel, log: &JobLog) -> Result<ArtifactRef, ArtifactError> {
    let key = ObjectKey::model(spec.output_model_name())?;
    let vid = store.put(&key, &model.to_archive())?;
    log.line(format!("stored {key} version {vid} ({})", model.model_version));
    Ok(ArtifactRef::new(&key, vid))
}

fn train_inner(store: &dyn ObjectStore, spec: &JobSpec, log: &JobLog) -> Result<JobResult, ArtifactError> {
    let corpus = load_corpus(store, &spec.corpus.id, spec.corpus.version)?;
    log.line(format!(
        "loaded corpus {} version {} ({} utterances)",
        corpus.id,
        corpus.version,
        corpus.utterances.len()
    ));
    let has_dev = corpus.split(Split::Dev).next().is_some();
    let base = spec.hyper.clone().unwrap_or_default();
    let mut result = JobResult::empty(&spec.job_id);

    let model = if spec.kind == JobKind::GridSearch {
        let grid = spec.grid.clone().unwrap_or_default();
        let found = grid_search(&corpus, &grid, spec.metric, &base)?;
        for entry in &found.leaderboard {
            log.line(format!("grid point {:?} scored {:.6}", entry.hyper, entry.score));
        }
        log.line(format!("best point {:?}", found.best));
        let model = train_joint(&corpus, &found.best)?;
        result.grid = Some(found);
        model
    } else if spec.seeds.len() > 1 {
        if !has_dev {
            return Err(ModelError::EmptyDevSplit.into());
        }
        let mut models = Vec::new();
        for &seed in &spec.seeds {
            let hyper = Hyperparams { seed, ..base.clone() };
            let model = train_joint(&corpus, &hyper)?;
            let score = spec.metric.value(&evaluate_split(&model, &corpus, Split::Dev)?)?;
            log.line(format!("seed {seed} dev score {score:.6}"));
            result.seed_scores.push(SeedScore { seed, score });
            models.push(model);
        }
        let scores: Vec<f64> = result.seed_scores.iter().map(|s| s.score).collect();
        result.seed_mean = Some(scores.iter().sum::<f64>() / scores.len() as f64);
        let keep = median_index(&scores);
        log.line(format!("keeping median seed {}", spec.seeds[keep]));
        models.swap_remove(keep)
    } else {
        let hyper = match spec.seeds.first() {
            Some(&seed) => Hyperparams { seed, ..base },
            None => base,
        };
        log.line(format!("training with {hyper:?}"));
        train_joint(&corpus, &hyper)?
    };

    result.model = Some(store_model(store, spec, &model, log)?);
    if has_dev {
        let bundle = ReportBundle::compute(&model, &corpus, Split::Dev)?;
        log.line(format!("dev slot f1 {:.6}", bundle.report.slot_f1));
        result.report = Some(save_report(store, &spec.job_id, &bundle)?);
        result.dev_report = Some(bundle.report);
    }
    Ok(result)
}

fn test_inner(store: &dyn ObjectStore, spec: &JobSpec, log: &JobLog) -> Result<JobResult, ArtifactError> {
    let selector = spec.model.as_ref().expect("validated test spec");
    let (model, vid) = load_model(store, &selector.name, selector.version.as_ref())?;
    log.line(format!("loaded model {} version {vid}", selector.name));
    let corpus = load_corpus(store, &spec.corpus.id, spec.corpus.version)?;
    let split = spec.split.unwrap_or(Split::Test);
    log.line(format!("scoring {split:?} split of {} version {}", corpus.id, corpus.version));
    let bundle = ReportBundle::compute(&model, &corpus, split)?;
    let report = save_report(store, &spec.job_id, &bundle)?;
    log.line(format!("stored {} version {}", report.key, report.version));
    let mut result = JobResult::empty(&spec.job_id);
    result.report = Some(report);
    Ok(result)
}

fn finish(spec: &JobSpec, log: &JobLog, started: Instant, outcome: std::thread::Result<Result<JobResult, ArtifactError>>) -> JobResult {
    let mut result = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => {
            log.line(format!("error: {e}"));
            JobResult::failed(&spec.job_id, e.to_string())
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "job panicked".into());
            log.line(format!("panic: {msg}"));
            JobResult::failed(&spec.job_id, msg)
        }
    };
    result.wall_time_s = started.elapsed().as_secs_f64();
    result.log_tail = log.tail(LOG_TAIL_LINES);
    result
}

/// Runs a train or grid-search job to completion. Errors become a failed
/// result.
pub fn handle_train(store: &dyn ObjectStore, spec: &JobSpec, log: &JobLog) -> JobResult {
    let started = Instant::now();
    finish(spec, log, started, catch_unwind(AssertUnwindSafe(|| train_inner(store, spec, log))))
}

/// Scores a pinned model on one split and stores the report bundle under
/// `reports/<job_id>`.
pub fn handle_test(store: &dyn ObjectStore, spec: &JobSpec, log: &JobLog) -> JobResult {
    let started = Instant::now();
    finish(spec, log, started, catch_unwind(AssertUnwindSafe(|| test_inner(store, spec, log))))
}

pub fn run_job(store: &dyn ObjectStore, spec: &JobSpec, log: &JobLog) -> JobResult {
    if let Err(e) = spec.validate() {
        return JobResult::failed(&spec.job_id, e);
    }
    match spec.kind {
        JobKind::Train | JobKind::GridSearch => handle_train(store, spec, log),
        JobKind::Test => handle_test(store, spec, log),
    }
}

// ---------------------------------------------------------------------------
// Worker

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerJobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerJobView {
    pub job_id: String,
    pub kind: JobKind,
    pub state: WorkerJobState,
    pub result: Option<JobResult>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AcceptError {
    #[error("no free slot")]
    Busy(UtilizationReport),
    #[error("invalid job spec: {0}")]
    Invalid(String),
}

struct Entry {
    kind: JobKind,
    result: Option<JobResult>,
    log: JobLog,
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Entry>,
    /// Running job ids in start order.
    running: Vec<String>,
}

pub struct Worker {
    instance_id: String,
    capacity: usize,
    store: Arc<dyn ObjectStore>,
    started: Instant,
    inner: Mutex<Inner>,
    finished: Condvar,
}

impl Worker {
    pub fn new(instance_id: impl Into<String>, capacity_slots: usize, store: Arc<dyn ObjectStore>) -> Arc<Self> {
        assert!(capacity_slots > 0, "capacity must be positive");
        Arc::new(Worker {
            instance_id: instance_id.into(),
            capacity: capacity_slots,
            store,
            started: Instant::now(),
            inner: Mutex::new(Inner::default()),
            finished: Condvar::new(),
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    fn snapshot(&self, inner: &Inner) -> UtilizationReport {
        let used = inner.running.len();
        UtilizationReport {
            instance_id: self.instance_id.clone(),
            busy: used > 0,
            running_job: inner.running.first().cloned(),
            capacity_slots: self.capacity,
            used_slots: used,
            uptime_s: self.started.elapsed().as_secs_f64(),
            queue_accepting: used < self.capacity,
        }
    }

    pub fn utilization(&self) -> UtilizationReport {
        self.snapshot(&self.inner.lock().unwrap())
    }

    /// Takes a slot and starts the job on its own thread. Re-submitting a
    /// known job id is a no-op; a full worker rejects without state change.
    pub fn accept(self: &Arc<Self>, spec: JobSpec) -> Result<(), AcceptError> {
        spec.validate().map_err(AcceptError::Invalid)?;
        let log = JobLog::default();
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.jobs.contains_key(&spec.job_id) {
                return Ok(());
            }
            if inner.running.len() >= self.capacity {
                return Err(AcceptError::Busy(self.snapshot(&inner)));
            }
            inner.running.push(spec.job_id.clone());
            inner.jobs.insert(
                spec.job_id.clone(),
                Entry {
                    kind: spec.kind,
                    result: None,
                    log: log.clone(),
                },
            );
        }
        log.line(format!("accepted {} job {} on {}", spec.kind, spec.job_id, self.instance_id));
        tracing::info!(instance = %self.instance_id, job = %spec.job_id, kind = %spec.kind, "job accepted");
        let me = Arc::clone(self);
        std::thread::spawn(move || {
            let result = run_job(me.store.as_ref(), &spec, &log);
            match &result.error {
                Some(e) => tracing::warn!(instance = %me.instance_id, job = %spec.job_id, error = %e, "job failed"),
                None => tracing::info!(instance = %me.instance_id, job = %spec.job_id, status = ?result.status, "job done"),
            }
            let mut inner = me.inner.lock().unwrap();
            inner.running.retain(|id| *id != spec.job_id);
            if let Some(entry) = inner.jobs.get_mut(&spec.job_id) {
                entry.result = Some(result);
            }
            drop(inner);
            me.finished.notify_all();
        });
        Ok(())
    }

    pub fn job(&self, job_id: &str) -> Option<WorkerJobView> {
        let inner = self.inner.lock().unwrap();
        inner.jobs.get(job_id).map(|e| WorkerJobView {
            job_id: job_id.to_string(),
            kind: e.kind,
            state: match &e.result {
                None => WorkerJobState::Running,
                Some(r) if r.status == JobStatus::Succeeded => WorkerJobState::Succeeded,
                Some(_) => WorkerJobState::Failed,
            },
            result: e.result.clone(),
        })
    }

    pub fn logs(&self, job_id: &str) -> Option<Vec<String>> {
        let inner = self.inner.lock().unwrap();
        inner.jobs.get(job_id).map(|e| e.log.lines())
    }

    /// Blocks until the job finishes or `timeout` passes.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Option<JobResult> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock().unwrap();
        loop {
            match inner.jobs.get(job_id) {
                None => return None,
                Some(Entry { result: Some(r), .. }) => return Some(r.clone()),
                Some(_) => {}
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            inner = self.finished.wait_timeout(inner, left).unwrap().0;
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP surface

fn error_body(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn submit(worker: &Arc<Worker>, body: &[u8], route: JobKind) -> Response {
    let spec: JobSpec = match serde_json::from_slice(body) {
        Ok(s) => s,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, format!("malformed job spec: {e}")),
    };
    let kind_ok = match route {
        JobKind::Test => spec.kind == JobKind::Test,
        _ => spec.kind != JobKind::Test,
    };
    if !kind_ok {
        return error_body(StatusCode::BAD_REQUEST, format!("{} jobs are not accepted on this route", spec.kind));
    }
    let job_id = spec.job_id.clone();
    match worker.accept(spec) {
        Ok(()) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))).into_response(),
        Err(AcceptError::Busy(report)) => (StatusCode::CONFLICT, Json(report)).into_response(),
        Err(AcceptError::Invalid(msg)) => error_body(StatusCode::BAD_REQUEST, msg),
    }
}

async fn post_train(State(w): State<Arc<Worker>>, body: Bytes) -> Response {
    submit(&w, &body, JobKind::Train)
}

async fn post_test(State(w): State<Arc<Worker>>, body: Bytes) -> Response {
    submit(&w, &body, JobKind::Test)
}

async fn get_is_free(State(w): State<Arc<Worker>>) -> Json<UtilizationReport> {
    Json(w.utilization())
}

async fn get_job(State(w): State<Arc<Worker>>, Path(id): Path<String>) -> Response {
    match w.job(&id) {
        Some(view) => Json(view).into_response(),
        None => error_body(StatusCode::NOT_FOUND, format!("unknown job {id:?}")),
    }
}

async fn get_logs(State(w): State<Arc<Worker>>, Path(id): Path<String>) -> Response {
    match w.logs(&id) {
        Some(lines) => {
            let mut text = lines.join("\n");
            text.push('\n');
            ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response()
        }
        None => error_body(StatusCode::NOT_FOUND, format!("unknown job {id:?}")),
    }
}

pub fn router(worker: Arc<Worker>) -> Router {
    Router::new()
        .route("/train", post(post_train))
        .route("/test", post(post_test))
        .route("/is_free", get(get_is_free))
        .route("/jobs/:id", get(get_job))
        .route("/logs/:id", get(get_logs))
        .with_state(worker)
}

/// A worker HTTP server on its own runtime thread. Dropping the handle
/// shuts the server down.
pub struct WorkerServer {
    pub addr: SocketAddr,
    pub worker: Arc<Worker>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl WorkerServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(worker: Arc<Worker>, addr: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let bound = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(Arc::clone(&worker));
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
        Ok(WorkerServer {
            addr: bound,
            worker,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits (it only does after `stop` or drop).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
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

impl Drop for WorkerServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{load_report, save_corpus};
    use crate::ir::{Corpus, SlotSpan, Utterance};
    use crate::store::FsStore;

    fn toy_store() -> (tempfile::TempDir, Arc<FsStore>) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(FsStore::open(dir.path()).unwrap());
        let mut c = Corpus::new("toy", "toy");
        let rows = [
            ("brighten the sky", "bright", Split::Train),
            ("lighten the face", "bright", Split::Train),
            ("crop the sky", "crop", Split::Train),
            ("trim the face", "crop", Split::Train),
            ("brighten the face", "bright", Split::Dev),
            ("trim the sky", "crop", Split::Dev),
            ("lighten the sky", "bright", Split::Test),
        ];
        for (k, (text, intent, split)) in rows.into_iter().enumerate() {
            c.push(
                Utterance::from_text(format!("u{k}"), text)
                    .with_intent(intent)
                    .with_slots(vec![SlotSpan::new(2, 3, "object")])
                    .with_split(split),
            );
        }
        save_corpus(store.as_ref(), &mut c, None).unwrap();
        (dir, store)
    }

    #[test]
    fn spec_validation() {
        assert!(JobSpec::train("j1", "toy", Hyperparams::default()).validate().is_ok());
        let mut no_hyper = JobSpec::train("j1", "toy", Hyperparams::default());
        no_hyper.hyper = None;
        assert!(no_hyper.validate().is_err());
        let mut test = JobSpec::test("j2", "toy", "toy", VersionId::from("00000001-aaaaaaaaaaaa"));
        assert!(test.validate().is_ok());
        test.model.as_mut().unwrap().version = None;
        assert!(test.validate().is_err());
        assert!(JobSpec::grid_search("j3", "toy", Grid::default(), Metric::SlotF1).validate().is_err());
        assert!(JobSpec::train("a/b", "toy", Hyperparams::default()).validate().is_err());
        assert!(JobSpec::train("", "toy", Hyperparams::default()).validate().is_err());
    }

    #[test]
    fn median_picks_lower_middle() {
        assert_eq!(median_index(&[0.3, 0.1, 0.2]), 2);
        assert_eq!(median_index(&[0.5, 0.5, 0.5]), 1);
        assert_eq!(median_index(&[0.9, 0.1]), 1);
        assert_eq!(median_index(&[0.4]), 0);
    }

    #[test]
    fn train_then_test_through_the_store() {
        let (_d, store) = toy_store();
        let log = JobLog::default();
        let r = handle_train(store.as_ref(), &JobSpec::train("t1", "toy", Hyperparams::default()), &log);
        assert_eq!(r.status, JobStatus::Succeeded, "{:?}", r.error);
        assert!(r.error.is_none());
        let model = r.model.unwrap();
        assert_eq!(model.key, "models/toy");
        assert!(r.dev_report.unwrap().intent_accuracy.is_some());
        assert!(!r.log_tail.is_empty());

        let spec = JobSpec::test("t2", "toy", "toy", model.version);
        let r = handle_test(store.as_ref(), &spec, &JobLog::default());
        assert_eq!(r.status, JobStatus::Succeeded, "{:?}", r.error);
        let bundle = load_report(store.as_ref(), "t2", None).unwrap();
        assert_eq!(bundle.report.n_utterances, 1);
        assert!(bundle.intent_confusion.is_some());
    }

    #[test]
    fn seeds_record_scores_and_mean() {
        let (_d, store) = toy_store();
        let mut spec = JobSpec::train("s", "toy", Hyperparams::default());
        spec.seeds = vec![1, 2, 3];
        let r = handle_train(store.as_ref(), &spec, &JobLog::default());
        assert_eq!(r.status, JobStatus::Succeeded, "{:?}", r.error);
        assert_eq!(r.seed_scores.len(), 3);
        let mean = r.seed_scores.iter().map(|s| s.score).sum::<f64>() / 3.0;
        assert_eq!(r.seed_mean, Some(mean));
    }

    #[test]
    fn failures_are_results() {
        let (_d, store) = toy_store();
        let r = handle_train(store.as_ref(), &JobSpec::train("x", "missing", Hyperparams::default()), &JobLog::default());
        assert_eq!(r.status, JobStatus::Failed);
        assert!(r.error.as_deref().unwrap().contains("not found"));
        let mut spec = JobSpec::test("y", "toy", "toy", VersionId::from("00000001-aaaaaaaaaaaa"));
        spec.split = Some(Split::Test);
        let r = handle_test(store.as_ref(), &spec, &JobLog::default());
        assert_eq!(r.status, JobStatus::Failed);
    }

    #[test]
    fn slot_accounting_and_busy_rejection() {
        let (_d, store) = toy_store();
        let w = Worker::new("i-1", 1, store);
        let idle = w.utilization();
        assert!(!idle.busy && idle.used_slots == 0 && idle.queue_accepting);

        w.accept(JobSpec::train("a", "toy", Hyperparams::default())).unwrap();
        let busy = w.utilization();
        // The job may already be done; the report is consistent either way.
        assert_eq!(busy.busy, busy.used_slots > 0);
        if busy.busy {
            assert_eq!(busy.running_job.as_deref(), Some("a"));
            assert!(!busy.queue_accepting);
            assert!(matches!(w.accept(JobSpec::train("b", "toy", Hyperparams::default())), Err(AcceptError::Busy(_))));
            assert!(w.job("b").is_none());
        }
        let r = w.wait("a", Duration::from_secs(30)).unwrap();
        assert_eq!(r.status, JobStatus::Succeeded);
        assert_eq!(w.utilization().used_slots, 0);
        assert_eq!(w.job("a").unwrap().state, WorkerJobState::Succeeded);
        assert!(w.logs("a").unwrap()[0].starts_with("accepted train job a"));
    }

    #[test]
    fn http_routes() {
        let (_d, store) = toy_store();
        let server = WorkerServer::start(Worker::new("i-9", 2, store), "127.0.0.1:0").unwrap();
        let client = reqwest::blocking::Client::new();
        let base = server.url();

        let r = client.post(format!("{base}/train")).body("{not json").send().unwrap();
        assert_eq!(r.status(), 400);
        let spec = JobSpec::train("h1", "toy", Hyperparams::default());
        let r = client.post(format!("{base}/test")).json(&spec).send().unwrap();
        assert_eq!(r.status(), 400);
        let r = client.post(format!("{base}/train")).json(&spec).send().unwrap();
        assert_eq!(r.status(), 202);
        assert_eq!(r.json::<serde_json::Value>().unwrap()["job_id"], "h1");

        let u: UtilizationReport = client.get(format!("{base}/is_free")).send().unwrap().json().unwrap();
        assert_eq!(u.capacity_slots, 2);
        server.worker.wait("h1", Duration::from_secs(30)).unwrap();
        let view: WorkerJobView = client.get(format!("{base}/jobs/h1")).send().unwrap().json().unwrap();
        assert_eq!(view.state, WorkerJobState::Succeeded);
        let logs = client.get(format!("{base}/logs/h1")).send().unwrap().text().unwrap();
        assert!(logs.contains("stored models/toy"));
        assert_eq!(client.get(format!("{base}/jobs/nope")).send().unwrap().status(), 404);
        server.stop();
    }
}
