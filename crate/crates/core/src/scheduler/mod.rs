//! Job queue and worker pool.
//!
//! The registry and queue form one serialized state machine behind a mutex.
//! Ticks split into a planning step under the lock, worker I/O without it,
//! and an apply step under the lock again; jobs planned onto an instance
//! hold their slot in between, so concurrent ticks cannot over-assign.

mod provider;
pub mod scripted;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worker::{JobResult, JobSpec, JobStatus, UtilizationReport};

pub use provider::{
    DispatchError, HttpWorkerClient, InstanceProvider, PollOutcome, ProviderError, SimulatedCluster, SubprocessProvider, WorkerClient,
    LISTENING_PREFIX,
};

/// Milliseconds since the Unix epoch (or since an arbitrary origin for
/// manual clocks).
pub type Millis = u64;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Millis;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Millis) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn advance(&self, ms: Millis) -> Millis {
        self.0.fetch_add(ms, Ordering::SeqCst) + ms
    }

    pub fn set(&self, ms: Millis) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareDescriptor {
    pub cpus: u32,
    pub ram_gb: u32,
    pub gpus: u32,
    pub gpu_model: String,
}

impl Default for HardwareDescriptor {
    fn default() -> Self {
        HardwareDescriptor {
            cpus: 4,
            ram_gb: 8,
            gpus: 1,
            gpu_model: "V100".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceConfig {
    pub capacity_slots: usize,
    pub hardware: HardwareDescriptor,
    pub reserved_by: Option<String>,
    pub pinned: bool,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            capacity_slots: 1,
            hardware: HardwareDescriptor::default(),
            reserved_by: None,
            pinned: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Starting,
    Ready,
    Draining,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub endpoint: String,
    pub capacity_slots: usize,
    pub state: InstanceState,
    pub last_heartbeat: Millis,
    pub reserved_by: Option<String>,
    pub pinned: bool,
    pub hardware: HardwareDescriptor,
    pub created_at: Millis,
    /// Set while no job holds a slot.
    pub idle_since: Option<Millis>,
    pub assigned_jobs: BTreeSet<String>,
    /// Latest report from the worker.
    pub utilization: Option<UtilizationReport>,
    /// Set by a busy rejection; cleared by the next successful probe.
    #[serde(default)]
    pub busy_hold: bool,
}

impl InstanceRecord {
    pub fn free_slots(&self) -> usize {
        self.capacity_slots.saturating_sub(self.assigned_jobs.len())
    }

    fn accepts(&self, job: &JobRecord) -> bool {
        if self.state != InstanceState::Ready || self.busy_hold || self.free_slots() == 0 {
            return false;
        }
        match (&job.target_instance, &self.reserved_by) {
            (Some(target), _) => *target == self.instance_id,
            (None, Some(team)) => job.spec.team.as_ref() == Some(team),
            (None, None) => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Assigned,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    /// The scheduler's transition relation.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Assigned)
                | (Queued, Cancelled)
                | (Queued, Failed)
                | (Assigned, Running)
                | (Assigned, Queued)
                | (Assigned, Failed)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Running, Queued)
        )
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("state serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: JobSpec,
    pub state: JobState,
    pub assigned_instance: Option<String>,
    pub target_instance: Option<String>,
    pub submitted_at: Millis,
    pub started_at: Option<Millis>,
    pub finished_at: Option<Millis>,
    pub attempts: u32,
    /// FIFO position.
    pub seq: u64,
    pub idempotency_key: Option<String>,
    pub result: Option<JobResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolPolicy {
    pub min_ready: usize,
    pub max_instances: usize,
    pub scale_up_queue_threshold: usize,
    pub idle_shutdown_s: u64,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        PoolPolicy {
            min_ready: 1,
            max_instances: 4,
            scale_up_queue_threshold: 1,
            idle_shutdown_s: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub pool: PoolPolicy,
    pub retry_cap: u32,
    pub heartbeat_timeout_ms: Millis,
    /// Slots and hardware for instances the autoscaler starts.
    pub instance_template: InstanceConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            pool: PoolPolicy::default(),
            retry_cap: 3,
            heartbeat_timeout_ms: 10_000,
            instance_template: InstanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("job {0:?} already exists")]
    DuplicateJob(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("instance {0:?} is not accepting jobs")]
    InstanceUnavailable(String),
    #[error("job {job:?} cannot go from {from} to {to}")]
    IllegalTransition { job: String, from: JobState, to: JobState },
    #[error("instance limit of {0} reached")]
    CapacityExhausted(usize),
    #[error("invalid pool policy: {0}")]
    InvalidPolicy(String),
    #[error("provider failure: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScaleAction {
    Spawn { instance_id: String },
    SpawnFailed { error: String },
    Stop { instance_id: String },
}

/// Error text for targeted jobs whose instance went away.
pub const TARGET_LOST: &str = "targeted instance lost";

#[derive(Default)]
struct State {
    instances: BTreeMap<String, InstanceRecord>,
    jobs: HashMap<String, JobRecord>,
    queued: BTreeMap<u64, String>,
    idempotency: HashMap<String, String>,
    next_seq: u64,
    next_instance: u64,
    provider_errors: Vec<String>,
}

impl State {
    fn transition(&mut self, job_id: &str, to: JobState) -> Result<(), SchedulerError> {
        let job = self.jobs.get_mut(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        if !job.state.can_become(to) {
            return Err(SchedulerError::IllegalTransition {
                job: job_id.to_string(),
                from: job.state,
                to,
            });
        }
        if job.state == JobState::Queued {
            self.queued.remove(&job.seq);
        }
        if to == JobState::Queued {
            self.queued.insert(job.seq, job_id.to_string());
            job.assigned_instance = None;
            job.started_at = None;
        }
        tracing::debug!(job = job_id, from = %job.state, to = %to, "job transition");
        job.state = to;
        Ok(())
    }

    /// Drops the job's slot on its instance; stops a drained instance.
    fn release(&mut self, job_id: &str, instance_id: &str, now: Millis, to_stop: &mut Vec<(String, String)>) {
        if let Some(inst) = self.instances.get_mut(instance_id) {
            inst.assigned_jobs.remove(job_id);
            if inst.assigned_jobs.is_empty() {
                inst.idle_since = Some(now);
                if inst.state == InstanceState::Draining {
                    to_stop.push((inst.instance_id.clone(), inst.endpoint.clone()));
                }
            }
        }
    }

    fn finish(&mut self, job_id: &str, to: JobState, now: Millis, error: Option<String>) -> Result<(), SchedulerError> {
        self.transition(job_id, to)?;
        let job = self.jobs.get_mut(job_id).expect("transitioned above");
        job.finished_at = Some(now);
        match &error {
            Some(e) => tracing::warn!(job = job_id, state = %to, error = %e, "job finished"),
            None => tracing::info!(job = job_id, state = %to, "job finished"),
        }
        if error.is_some() {
            job.error = error;
        }
        Ok(())
    }

    /// A job lost its instance: requeue it, or fail it at the retry cap or
    /// when it was pinned to that instance.
    fn requeue_or_fail(&mut self, job_id: &str, retry_cap: u32, now: Millis, reason: &str) -> Result<(), SchedulerError> {
        let job = &self.jobs[job_id];
        if job.target_instance.is_some() {
            self.finish(job_id, JobState::Failed, now, Some(format!("{TARGET_LOST}: {reason}")))
        } else if job.attempts >= retry_cap {
            let attempts = job.attempts;
            self.finish(job_id, JobState::Failed, now, Some(format!("{reason}; gave up after {attempts} attempts")))
        } else {
            self.transition(job_id, JobState::Queued)
        }
    }

    /// Marks an instance stopped and settles every job that depended on it.
    fn stop_instance(&mut self, instance_id: &str, retry_cap: u32, now: Millis, reason: &str) -> Vec<String> {
        let Some(inst) = self.instances.get_mut(instance_id) else {
            return Vec::new();
        };
        inst.state = InstanceState::Stopped;
        inst.idle_since = None;
        tracing::info!(instance = instance_id, reason, "instance stopped");
        let held: Vec<String> = std::mem::take(&mut inst.assigned_jobs).into_iter().collect();
        let mut affected = Vec::new();
        for job_id in held {
            if self.requeue_or_fail(&job_id, retry_cap, now, reason).is_ok() {
                affected.push(job_id);
            }
        }
        let waiting: Vec<String> = self
            .queued
            .values()
            .filter(|id| self.jobs[*id].target_instance.as_deref() == Some(instance_id))
            .cloned()
            .collect();
        for job_id in waiting {
            if self
                .finish(&job_id, JobState::Failed, now, Some(format!("{TARGET_LOST}: {reason}")))
                .is_ok()
            {
                affected.push(job_id);
            }
        }
        affected
    }

    fn count(&self, state: InstanceState) -> usize {
        self.instances.values().filter(|i| i.state == state).count()
    }

    fn live_count(&self) -> usize {
        self.instances.values().filter(|i| i.state != InstanceState::Stopped).count()
    }

    fn new_instance_id(&mut self) -> String {
        self.next_instance += 1;
        format!("i-{:04}", self.next_instance)
    }

    fn record_provider_error(&mut self, error: String) {
        const KEEP: usize = 32;
        self.provider_errors.push(error);
        if self.provider_errors.len() > KEEP {
            self.provider_errors.remove(0);
        }
    }
}

/// Assignments for one tick over a fixed snapshot: queued jobs in FIFO
/// order, each to the eligible instance with the most free slots (lowest
/// id on ties).
fn plan(state: &State) -> Vec<(String, String)> {
    let mut free: BTreeMap<&str, usize> = state
        .instances
        .values()
        .map(|i| (i.instance_id.as_str(), i.free_slots()))
        .collect();
    let mut out = Vec::new();
    for job_id in state.queued.values() {
        let job = &state.jobs[job_id];
        let mut best: Option<(&str, usize)> = None;
        for inst in state.instances.values() {
            let f = free[inst.instance_id.as_str()];
            if f == 0 || !inst.accepts(job) {
                continue;
            }
            if best.is_none_or(|(_, bf)| f > bf) {
                best = Some((inst.instance_id.as_str(), f));
            }
        }
        if let Some((id, _)) = best {
            *free.get_mut(id).expect("known instance") -= 1;
            out.push((job_id.clone(), id.to_string()));
        }
    }
    out
}

pub struct Scheduler {
    config: SchedulerConfig,
    provider: Arc<dyn InstanceProvider>,
    client: Arc<dyn WorkerClient>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

impl Scheduler {
    pub fn new(
        config: SchedulerConfig,
        provider: Arc<dyn InstanceProvider>,
        client: Arc<dyn WorkerClient>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SchedulerError> {
        let pool = &config.pool;
        if pool.min_ready > pool.max_instances {
            return Err(SchedulerError::InvalidPolicy(format!(
                "min_ready {} exceeds max_instances {}",
                pool.min_ready, pool.max_instances
            )));
        }
        if config.instance_template.capacity_slots == 0 {
            return Err(SchedulerError::InvalidPolicy("capacity_slots must be positive".into()));
        }
        Ok(Scheduler {
            config,
            provider,
            client,
            clock,
            state: Mutex::new(State::default()),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    // -- jobs ---------------------------------------------------------------

    /// Queues a job. A repeated `idempotency_key` returns the original id
    /// without queueing anything.
    pub fn submit_job(
        &self,
        mut spec: JobSpec,
        target_instance: Option<String>,
        idempotency_key: Option<String>,
    ) -> Result<String, SchedulerError> {
        let now = self.now();
        let mut st = self.lock();
        if let Some(existing) = idempotency_key.as_ref().and_then(|k| st.idempotency.get(k)) {
            return Ok(existing.clone());
        }
        st.next_seq += 1;
        let seq = st.next_seq;
        if spec.job_id.is_empty() {
            spec.job_id = format!("job-{seq:06}");
        }
        spec.validate().map_err(SchedulerError::InvalidSpec)?;
        if st.jobs.contains_key(&spec.job_id) {
            return Err(SchedulerError::DuplicateJob(spec.job_id));
        }
        if let Some(target) = &target_instance {
            let inst = st
                .instances
                .get(target)
                .ok_or_else(|| SchedulerError::UnknownInstance(target.clone()))?;
            if matches!(inst.state, InstanceState::Draining | InstanceState::Stopped) {
                return Err(SchedulerError::InstanceUnavailable(target.clone()));
            }
        }
        let id = spec.job_id.clone();
        if let Some(k) = &idempotency_key {
            st.idempotency.insert(k.clone(), id.clone());
        }
        st.jobs.insert(
            id.clone(),
            JobRecord {
                spec,
                state: JobState::Queued,
                assigned_instance: None,
                target_instance,
                submitted_at: now,
                started_at: None,
                finished_at: None,
                attempts: 0,
                seq,
                idempotency_key,
                result: None,
                error: None,
            },
        );
        st.queued.insert(seq, id.clone());
        Ok(id)
    }

    pub fn cancel_job(&self, job_id: &str) -> Result<JobRecord, SchedulerError> {
        let now = self.now();
        let mut st = self.lock();
        st.finish(job_id, JobState::Cancelled, now, None)?;
        Ok(st.jobs[job_id].clone())
    }

    pub fn job(&self, job_id: &str) -> Option<JobRecord> {
        self.lock().jobs.get(job_id).cloned()
    }

    /// All jobs in submission order.
    pub fn jobs(&self) -> Vec<JobRecord> {
        let mut jobs: Vec<JobRecord> = self.lock().jobs.values().cloned().collect();
        jobs.sort_by_key(|j| j.seq);
        jobs
    }

    /// Applies a worker's terminal result. Returns false for stale results
    /// (the job is no longer running on `instance_id`).
    pub fn complete_job(&self, job_id: &str, instance_id: &str, result: JobResult) -> Result<bool, SchedulerError> {
        let now = self.now();
        let mut to_stop = Vec::new();
        let applied = {
            let mut st = self.lock();
            let job = st.jobs.get(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
            if job.state != JobState::Running || job.assigned_instance.as_deref() != Some(instance_id) {
                false
            } else {
                let to = match result.status {
                    JobStatus::Succeeded => JobState::Succeeded,
                    JobStatus::Failed => JobState::Failed,
                };
                let error = result.error.clone();
                st.finish(job_id, to, now, error)?;
                st.jobs.get_mut(job_id).expect("known job").result = Some(result);
                st.release(job_id, instance_id, now, &mut to_stop);
                true
            }
        };
        self.stop_drained(to_stop, now);
        Ok(applied)
    }

    // -- instances ----------------------------------------------------------

    pub fn instances(&self) -> Vec<InstanceRecord> {
        self.lock().instances.values().cloned().collect()
    }

    pub fn instance(&self, id: &str) -> Option<InstanceRecord> {
        self.lock().instances.get(id).cloned()
    }

    /// Recent provider failures, oldest first.
    pub fn provider_errors(&self) -> Vec<String> {
        self.lock().provider_errors.clone()
    }

    fn launch(&self, config: &InstanceConfig) -> Result<String, SchedulerError> {
        let now = self.now();
        let id = {
            let mut st = self.lock();
            if st.live_count() >= self.config.pool.max_instances {
                return Err(SchedulerError::CapacityExhausted(self.config.pool.max_instances));
            }
            let id = st.new_instance_id();
            st.instances.insert(
                id.clone(),
                InstanceRecord {
                    instance_id: id.clone(),
                    endpoint: String::new(),
                    capacity_slots: config.capacity_slots,
                    state: InstanceState::Starting,
                    last_heartbeat: now,
                    reserved_by: config.reserved_by.clone(),
                    pinned: config.pinned,
                    hardware: config.hardware.clone(),
                    created_at: now,
                    idle_since: None,
                    assigned_jobs: BTreeSet::new(),
                    utilization: None,
                    busy_hold: false,
                },
            );
            id
        };
        match self.provider.start(&id, config) {
            Ok(endpoint) => {
                let mut st = self.lock();
                tracing::info!(instance = %id, endpoint = %endpoint, "instance started");
                if let Some(inst) = st.instances.get_mut(&id) {
                    inst.endpoint = endpoint;
                }
                Ok(id)
            }
            Err(e) => {
                let mut st = self.lock();
                st.instances.remove(&id);
                tracing::warn!(instance = %id, error = %e, "instance failed to start");
                st.record_provider_error(e.to_string());
                Err(SchedulerError::Provider(e.to_string()))
            }
        }
    }

    fn probe(&self, id: &str, endpoint: &str) {
        if let Ok(report) = self.client.is_free(endpoint) {
            let now = self.now();
            let mut st = self.lock();
            if let Some(inst) = st.instances.get_mut(id) {
                if inst.state == InstanceState::Stopped {
                    return;
                }
                inst.last_heartbeat = now;
                inst.utilization = Some(report);
                inst.busy_hold = false;
                if inst.state == InstanceState::Starting {
                    inst.state = InstanceState::Ready;
                    if inst.assigned_jobs.is_empty() {
                        inst.idle_since = Some(now);
                    }
                }
            }
        }
    }

    /// Starts an instance and probes it once, so a healthy provider yields
    /// a ready record.
    pub fn create_instance(&self, config: InstanceConfig) -> Result<InstanceRecord, SchedulerError> {
        if config.capacity_slots == 0 {
            return Err(SchedulerError::InvalidPolicy("capacity_slots must be positive".into()));
        }
        let id = self.launch(&config)?;
        let endpoint = self.lock().instances[&id].endpoint.clone();
        self.probe(&id, &endpoint);
        Ok(self.lock().instances[&id].clone())
    }

    /// Drains the instance: it takes no new jobs and stops once its running
    /// jobs finish (immediately when idle).
    pub fn stop_instance(&self, id: &str) -> Result<InstanceRecord, SchedulerError> {
        let now = self.now();
        let mut to_stop = Vec::new();
        let record = {
            let mut st = self.lock();
            let inst = st.instances.get_mut(id).ok_or_else(|| SchedulerError::UnknownInstance(id.to_string()))?;
            if inst.state != InstanceState::Stopped {
                if inst.assigned_jobs.is_empty() {
                    to_stop.push((inst.instance_id.clone(), inst.endpoint.clone()));
                } else {
                    inst.state = InstanceState::Draining;
                }
            }
            inst.clone()
        };
        if to_stop.is_empty() {
            return Ok(record);
        }
        self.stop_drained(to_stop, now);
        Ok(self.lock().instances[id].clone())
    }

    fn stop_drained(&self, to_stop: Vec<(String, String)>, now: Millis) {
        for (id, endpoint) in to_stop {
            self.lock().stop_instance(&id, self.config.retry_cap, now, "instance stopped");
            self.provider.stop(&id, &endpoint);
        }
    }

    // -- ticks --------------------------------------------------------------

    /// Assigns queued jobs to instances and dispatches them.
    pub fn assignment_tick(&self, now: Millis) -> Vec<(String, String)> {
        let mut dispatches = Vec::new();
        let planned = {
            let mut st = self.lock();
            let planned = plan(&st);
            for (job_id, inst_id) in &planned {
                st.transition(job_id, JobState::Assigned).expect("planned jobs are queued");
                let job = st.jobs.get_mut(job_id).expect("known job");
                job.attempts += 1;
                job.assigned_instance = Some(inst_id.clone());
                let spec = job.spec.clone();
                let inst = st.instances.get_mut(inst_id).expect("known instance");
                inst.assigned_jobs.insert(job_id.clone());
                inst.idle_since = None;
                dispatches.push((job_id.clone(), inst_id.clone(), inst.endpoint.clone(), spec));
            }
            planned
        };

        let outcomes: Vec<_> = dispatches
            .into_iter()
            .map(|(job_id, inst_id, endpoint, spec)| {
                let outcome = self.client.dispatch(&endpoint, &spec);
                (job_id, inst_id, outcome)
            })
            .collect();

        let mut to_stop = Vec::new();
        let mut assigned = Vec::new();
        {
            let mut st = self.lock();
            for (job_id, inst_id, outcome) in outcomes {
                // The instance may have died while the dispatch was in flight.
                if st.jobs[&job_id].state != JobState::Assigned {
                    continue;
                }
                match outcome {
                    Ok(()) => {
                        st.transition(&job_id, JobState::Running).expect("assigned job");
                        st.jobs.get_mut(&job_id).expect("known job").started_at = Some(now);
                        assigned.push((job_id, inst_id));
                    }
                    Err(DispatchError::Busy(report)) => {
                        st.transition(&job_id, JobState::Queued).expect("assigned job");
                        // A rejection is not an attempt.
                        st.jobs.get_mut(&job_id).expect("known job").attempts -= 1;
                        st.release(&job_id, &inst_id, now, &mut to_stop);
                        if let Some(inst) = st.instances.get_mut(&inst_id) {
                            inst.busy_hold = true;
                            if report.is_some() {
                                inst.utilization = report;
                            }
                        }
                    }
                    Err(DispatchError::Failed(msg)) => {
                        st.release(&job_id, &inst_id, now, &mut to_stop);
                        let _ = st.requeue_or_fail(&job_id, self.config.retry_cap, now, &format!("dispatch failed: {msg}"));
                    }
                }
            }
        }
        self.stop_drained(to_stop, now);
        debug_assert!(assigned.len() <= planned.len());
        assigned
    }

    /// Polls workers for running jobs and applies finished results.
    pub fn completion_tick(&self, now: Millis) -> Vec<String> {
        let running: Vec<(String, String, String)> = {
            let st = self.lock();
            st.instances
                .values()
                .filter(|i| i.state != InstanceState::Stopped)
                .flat_map(|i| {
                    i.assigned_jobs
                        .iter()
                        .filter(|j| st.jobs[*j].state == JobState::Running)
                        .map(|j| (j.clone(), i.instance_id.clone(), i.endpoint.clone()))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let mut done = Vec::new();
        let mut to_stop = Vec::new();
        for (job_id, inst_id, endpoint) in running {
            match self.client.poll(&endpoint, &job_id) {
                Ok(PollOutcome::Running) | Err(_) => {}
                Ok(PollOutcome::Done(result)) => {
                    if self.complete_job(&job_id, &inst_id, *result).unwrap_or(false) {
                        done.push(job_id);
                    }
                }
                Ok(PollOutcome::Unknown) => {
                    let mut st = self.lock();
                    if st.jobs[&job_id].state == JobState::Running && st.jobs[&job_id].assigned_instance.as_deref() == Some(&inst_id) {
                        st.release(&job_id, &inst_id, now, &mut to_stop);
                        let _ = st.requeue_or_fail(&job_id, self.config.retry_cap, now, "worker lost the job");
                        done.push(job_id);
                    }
                }
            }
        }
        self.stop_drained(to_stop, now);
        done
    }

    /// Probes every live instance; instances silent for longer than the
    /// heartbeat timeout are stopped and their jobs requeued or failed.
    pub fn heartbeat_sweep(&self, now: Millis) -> Vec<String> {
        let live: Vec<(String, String)> = {
            let st = self.lock();
            st.instances
                .values()
                .filter(|i| i.state != InstanceState::Stopped && !i.endpoint.is_empty())
                .map(|i| (i.instance_id.clone(), i.endpoint.clone()))
                .collect()
        };
        for (id, endpoint) in &live {
            self.probe(id, endpoint);
        }
        let mut affected = Vec::new();
        let mut dead = Vec::new();
        {
            let mut st = self.lock();
            let silent: Vec<String> = st
                .instances
                .values()
                .filter(|i| i.state != InstanceState::Stopped && now.saturating_sub(i.last_heartbeat) > self.config.heartbeat_timeout_ms)
                .map(|i| i.instance_id.clone())
                .collect();
            for id in silent {
                affected.extend(st.stop_instance(&id, self.config.retry_cap, now, "instance stopped responding"));
                dead.push((id.clone(), st.instances[&id].endpoint.clone()));
            }
        }
        for (id, endpoint) in dead {
            self.provider.stop(&id, &endpoint);
        }
        affected
    }

    /// Grows the pool toward the floor and for backlog, and stops idle
    /// instances above the floor.
    pub fn autoscale_tick(&self, now: Millis) -> Vec<ScaleAction> {
        let pool = &self.config.pool;
        let mut actions = Vec::new();
        let (to_spawn, to_stop) = {
            let st = self.lock();
            let ready = st.count(InstanceState::Ready);
            let starting = st.count(InstanceState::Starting);
            let live = st.live_count();
            let backlog = st
                .queued
                .values()
                .filter(|id| st.jobs[*id].target_instance.is_none())
                .count();
            // A queued job whose team no up instance serves would wait forever
            // behind reserved instances that satisfy the floor.
            let up = || {
                st.instances
                    .values()
                    .filter(|i| matches!(i.state, InstanceState::Ready | InstanceState::Starting))
            };
            let open_up = up().any(|i| i.reserved_by.is_none());
            let teams_up: BTreeSet<&String> = up().filter_map(|i| i.reserved_by.as_ref()).collect();
            let stranded = !open_up
                && st.queued.values().any(|id| {
                    let job = &st.jobs[id];
                    job.target_instance.is_none() && job.spec.team.as_ref().is_none_or(|t| !teams_up.contains(t))
                });
            let floor_deficit = pool.min_ready.saturating_sub(ready + starting);
            let grow = starting == 0 && (stranded || (backlog > 0 && backlog >= pool.scale_up_queue_threshold));
            let want = floor_deficit.max(usize::from(grow));
            let to_spawn = want.min(pool.max_instances.saturating_sub(live));

            let idle_ms = pool.idle_shutdown_s.saturating_mul(1000);
            let mut ready_left = ready;
            let mut to_stop = Vec::new();
            // Newest instances go first.
            for inst in st.instances.values().rev() {
                if ready_left <= pool.min_ready {
                    break;
                }
                let idle_long = inst.idle_since.is_some_and(|t| now.saturating_sub(t) > idle_ms);
                if inst.state == InstanceState::Ready
                    && !inst.pinned
                    && inst.reserved_by.is_none()
                    && inst.assigned_jobs.is_empty()
                    && idle_long
                {
                    to_stop.push((inst.instance_id.clone(), inst.endpoint.clone()));
                    ready_left -= 1;
                }
            }
            (to_spawn, to_stop)
        };
        for (id, _) in &to_stop {
            actions.push(ScaleAction::Stop { instance_id: id.clone() });
        }
        self.stop_drained(to_stop, now);
        for _ in 0..to_spawn {
            match self.launch(&self.config.instance_template) {
                Ok(id) => actions.push(ScaleAction::Spawn { instance_id: id }),
                Err(e) => actions.push(ScaleAction::SpawnFailed { error: e.to_string() }),
            }
        }
        actions
    }

    /// One full round: heartbeats, completions, assignments, autoscaling.
    pub fn tick(&self) {
        let now = self.now();
        self.heartbeat_sweep(now);
        self.completion_tick(now);
        self.assignment_tick(now);
        self.autoscale_tick(now);
    }

    /// Checks the registry/queue invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.lock();
        for inst in st.instances.values() {
            if inst.assigned_jobs.len() > inst.capacity_slots {
                return Err(format!("{} holds {} jobs over {} slots", inst.instance_id, inst.assigned_jobs.len(), inst.capacity_slots));
            }
            if inst.state == InstanceState::Stopped && !inst.assigned_jobs.is_empty() {
                return Err(format!("stopped {} still holds jobs", inst.instance_id));
            }
            for j in &inst.assigned_jobs {
                let job = st.jobs.get(j).ok_or_else(|| format!("{} holds unknown job {j}", inst.instance_id))?;
                if !matches!(job.state, JobState::Assigned | JobState::Running) || job.assigned_instance.as_deref() != Some(&inst.instance_id) {
                    return Err(format!("{} holds {j} in state {}", inst.instance_id, job.state));
                }
            }
        }
        for (id, job) in &st.jobs {
            let in_queue = st.queued.get(&job.seq) == Some(id);
            if in_queue != (job.state == JobState::Queued) {
                return Err(format!("queue index disagrees with {id} in state {}", job.state));
            }
            if let (Some(target), Some(assigned)) = (&job.target_instance, &job.assigned_instance) {
                if target != assigned {
                    return Err(format!("{id} targets {target} but sits on {assigned}"));
                }
            }
            if matches!(job.state, JobState::Assigned | JobState::Running) {
                let inst = job.assigned_instance.as_ref().ok_or_else(|| format!("{id} is active without an instance"))?;
                if !st.instances.get(inst).is_some_and(|i| i.assigned_jobs.contains(id)) {
                    return Err(format!("{id} is not held by {inst}"));
                }
            }
        }
        if st.queued.len() != st.jobs.values().filter(|j| j.state == JobState::Queued).count() {
            return Err("queue index has stale entries".into());
        }
        Ok(())
    }
}
