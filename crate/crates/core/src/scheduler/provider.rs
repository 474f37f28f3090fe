use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::store::ObjectStore;
use crate::worker::{AcceptError, JobKind, JobResult, JobSpec, UtilizationReport, Worker, WorkerJobState, WorkerJobView};

use super::InstanceConfig;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct ProviderError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchError {
    /// The worker had no free slot.
    Busy(Option<UtilizationReport>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    Running,
    Done(Box<JobResult>),
    /// The worker has no record of the job.
    Unknown,
}

/// Starts and stops worker instances.
pub trait InstanceProvider: Send + Sync {
    /// Returns the new instance's endpoint.
    fn start(&self, instance_id: &str, config: &InstanceConfig) -> Result<String, ProviderError>;
    fn stop(&self, instance_id: &str, endpoint: &str);
}

/// Talks to a worker at an endpoint.
pub trait WorkerClient: Send + Sync {
    fn dispatch(&self, endpoint: &str, spec: &JobSpec) -> Result<(), DispatchError>;
    fn poll(&self, endpoint: &str, job_id: &str) -> Result<PollOutcome, String>;
    fn is_free(&self, endpoint: &str) -> Result<UtilizationReport, String>;
}

fn outcome_of(view: WorkerJobView) -> PollOutcome {
    match (view.state, view.result) {
        (WorkerJobState::Running, _) | (_, None) => PollOutcome::Running,
        (_, Some(result)) => PollOutcome::Done(Box::new(result)),
    }
}

/// In-process workers addressed as `sim://<instance_id>`; acts as both the
/// provider and the client.
pub struct SimulatedCluster {
    store: Arc<dyn ObjectStore>,
    workers: Mutex<HashMap<String, Arc<Worker>>>,
}

impl SimulatedCluster {
    pub fn new(store: Arc<dyn ObjectStore>) -> Arc<Self> {
        Arc::new(SimulatedCluster {
            store,
            workers: Mutex::new(HashMap::new()),
        })
    }

    pub fn worker(&self, endpoint: &str) -> Option<Arc<Worker>> {
        self.workers.lock().unwrap().get(endpoint).cloned()
    }

    fn get(&self, endpoint: &str) -> Result<Arc<Worker>, String> {
        self.worker(endpoint).ok_or_else(|| format!("no worker at {endpoint}"))
    }
}

impl InstanceProvider for SimulatedCluster {
    fn start(&self, instance_id: &str, config: &InstanceConfig) -> Result<String, ProviderError> {
        let endpoint = format!("sim://{instance_id}");
        let worker = Worker::new(instance_id, config.capacity_slots, Arc::clone(&self.store));
        self.workers.lock().unwrap().insert(endpoint.clone(), worker);
        Ok(endpoint)
    }

    fn stop(&self, _instance_id: &str, endpoint: &str) {
        self.workers.lock().unwrap().remove(endpoint);
    }
}

impl WorkerClient for SimulatedCluster {
    fn dispatch(&self, endpoint: &str, spec: &JobSpec) -> Result<(), DispatchError> {
        let worker = self.get(endpoint).map_err(DispatchError::Failed)?;
        match worker.accept(spec.clone()) {
            Ok(()) => Ok(()),
            Err(AcceptError::Busy(report)) => Err(DispatchError::Busy(Some(report))),
            Err(AcceptError::Invalid(msg)) => Err(DispatchError::Failed(msg)),
        }
    }

    fn poll(&self, endpoint: &str, job_id: &str) -> Result<PollOutcome, String> {
        Ok(self.get(endpoint)?.job(job_id).map_or(PollOutcome::Unknown, outcome_of))
    }

    fn is_free(&self, endpoint: &str) -> Result<UtilizationReport, String> {
        Ok(self.get(endpoint)?.utilization())
    }
}

/// JSON-over-HTTP client for worker servers.
pub struct HttpWorkerClient {
    http: reqwest::blocking::Client,
}

impl Default for HttpWorkerClient {
    fn default() -> Self {
        HttpWorkerClient::new()
    }
}

impl HttpWorkerClient {
    pub fn new() -> Self {
        let http = reqwest::blocking::Client::builder()
            .connect_timeout(Duration::from_secs(2))
            .timeout(Duration::from_secs(10))
            .build()
            .expect("http client");
        HttpWorkerClient { http }
    }
}

impl WorkerClient for HttpWorkerClient {
    fn dispatch(&self, endpoint: &str, spec: &JobSpec) -> Result<(), DispatchError> {
        let route = if spec.kind == JobKind::Test { "test" } else { "train" };
        let resp = self
            .http
            .post(format!("{endpoint}/{route}"))
            .json(spec)
            .send()
            .map_err(|e| DispatchError::Failed(e.to_string()))?;
        match resp.status().as_u16() {
            202 => Ok(()),
            409 => Err(DispatchError::Busy(resp.json().ok())),
            code => Err(DispatchError::Failed(format!("worker replied {code}: {}", resp.text().unwrap_or_default()))),
        }
    }

    fn poll(&self, endpoint: &str, job_id: &str) -> Result<PollOutcome, String> {
        let resp = self.http.get(format!("{endpoint}/jobs/{job_id}")).send().map_err(|e| e.to_string())?;
        match resp.status().as_u16() {
            404 => Ok(PollOutcome::Unknown),
            200 => Ok(outcome_of(resp.json().map_err(|e| e.to_string())?)),
            code => Err(format!("worker replied {code}")),
        }
    }

    fn is_free(&self, endpoint: &str) -> Result<UtilizationReport, String> {
        let resp = self.http.get(format!("{endpoint}/is_free")).send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("worker replied {}", resp.status()));
        }
        resp.json().map_err(|e| e.to_string())
    }
}

/// Line a worker process prints once it is serving.
pub const LISTENING_PREFIX: &str = "listening on ";

/// Spawns `<program> worker ...` processes on the local host. Each prints
/// its URL on the first stdout line.
pub struct SubprocessProvider {
    program: PathBuf,
    store_root: PathBuf,
    startup_timeout: Duration,
    children: Mutex<HashMap<String, Child>>,
}

impl SubprocessProvider {
    pub fn new(program: impl Into<PathBuf>, store_root: impl Into<PathBuf>) -> Self {
        SubprocessProvider {
            program: program.into(),
            store_root: store_root.into(),
            startup_timeout: Duration::from_secs(15),
            children: Mutex::new(HashMap::new()),
        }
    }

    pub fn running(&self) -> usize {
        self.children.lock().unwrap().len()
    }
}

impl InstanceProvider for SubprocessProvider {
    fn start(&self, instance_id: &str, config: &InstanceConfig) -> Result<String, ProviderError> {
        let mut child = Command::new(&self.program)
            .arg("worker")
            .arg("--store-root")
            .arg(&self.store_root)
            .arg("--instance-id")
            .arg(instance_id)
            .arg("--capacity")
            .arg(config.capacity_slots.to_string())
            .arg("--bind")
            .arg("127.0.0.1:0")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError(format!("cannot spawn {}: {e}", self.program.display())))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let first = lines.next();
            let _ = tx.send(first);
            // Keep draining so the child never blocks on a full pipe.
            for _ in lines {}
        });
        let url = match rx.recv_timeout(self.startup_timeout) {
            Ok(Some(Ok(line))) if line.starts_with(LISTENING_PREFIX) => line[LISTENING_PREFIX.len()..].trim().to_string(),
            other => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ProviderError(format!("worker {instance_id} failed to start: {other:?}")));
            }
        };
        self.children.lock().unwrap().insert(instance_id.to_string(), child);
        Ok(url)
    }

    fn stop(&self, instance_id: &str, _endpoint: &str) {
        if let Some(mut child) = self.children.lock().unwrap().remove(instance_id) {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for SubprocessProvider {
    fn drop(&mut self) {
        for (_, mut child) in self.children.lock().unwrap().drain() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
