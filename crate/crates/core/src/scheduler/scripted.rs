//! A fake cluster for exercising the scheduler under faults: jobs take a
//! random number of clock milliseconds, dispatches are randomly rejected as
//! busy, instance starts can fail and instances can be killed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::worker::{JobResult, JobSpec, JobStatus, UtilizationReport};

use super::provider::{DispatchError, InstanceProvider, PollOutcome, ProviderError, WorkerClient};
use super::{Clock, InstanceConfig, Millis};

#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub busy_probability: f64,
    pub start_failure_probability: f64,
    pub job_failure_probability: f64,
    /// Inclusive range of job durations.
    pub job_ms: (Millis, Millis),
}

impl Default for FaultPlan {
    fn default() -> Self {
        FaultPlan {
            busy_probability: 0.1,
            start_failure_probability: 0.05,
            job_failure_probability: 0.05,
            job_ms: (1, 5_000),
        }
    }
}

struct FakeJob {
    finish_at: Millis,
    fails: bool,
}

struct FakeInstance {
    id: String,
    capacity: usize,
    alive: bool,
    jobs: HashMap<String, FakeJob>,
}

impl FakeInstance {
    fn running(&self, now: Millis) -> usize {
        self.jobs.values().filter(|j| j.finish_at > now).count()
    }
}

struct Inner {
    rng: ChaCha8Rng,
    instances: HashMap<String, FakeInstance>,
    dispatches: u64,
    busy_rejections: u64,
    kills: u64,
}

pub struct ScriptedCluster {
    plan: FaultPlan,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl ScriptedCluster {
    pub fn new(plan: FaultPlan, clock: Arc<dyn Clock>, seed: u64) -> Arc<Self> {
        Arc::new(ScriptedCluster {
            plan,
            clock,
            inner: Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                instances: HashMap::new(),
                dispatches: 0,
                busy_rejections: 0,
                kills: 0,
            }),
        })
    }

    /// Makes one live instance unreachable; returns its id.
    pub fn kill_random(&self) -> Option<String> {
        let mut inner = self.inner.lock().unwrap();
        let mut alive: Vec<String> = inner.instances.values().filter(|i| i.alive).map(|i| i.id.clone()).collect();
        if alive.is_empty() {
            return None;
        }
        alive.sort();
        let pick = alive[inner.rng.gen_range(0..alive.len())].clone();
        let endpoint = format!("fake://{pick}");
        inner.instances.get_mut(&endpoint).expect("alive instance").alive = false;
        inner.kills += 1;
        Some(pick)
    }

    /// `(dispatches, busy rejections, kills)` so far.
    pub fn stats(&self) -> (u64, u64, u64) {
        let inner = self.inner.lock().unwrap();
        (inner.dispatches, inner.busy_rejections, inner.kills)
    }

    /// Largest number of simultaneously running jobs on any live instance,
    /// paired with that instance's capacity.
    pub fn worst_load(&self) -> Option<(usize, usize)> {
        let now = self.clock.now_ms();
        let inner = self.inner.lock().unwrap();
        inner
            .instances
            .values()
            .filter(|i| i.alive)
            .map(|i| (i.running(now), i.capacity))
            .max_by_key(|(r, c)| (*r as i64) - (*c as i64))
    }
}

impl InstanceProvider for ScriptedCluster {
    fn start(&self, instance_id: &str, config: &InstanceConfig) -> Result<String, ProviderError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.rng.gen_bool(self.plan.start_failure_probability) {
            return Err(ProviderError(format!("injected start failure for {instance_id}")));
        }
        let endpoint = format!("fake://{instance_id}");
        inner.instances.insert(
            endpoint.clone(),
            FakeInstance {
                id: instance_id.to_string(),
                capacity: config.capacity_slots,
                alive: true,
                jobs: HashMap::new(),
            },
        );
        Ok(endpoint)
    }

    fn stop(&self, _instance_id: &str, endpoint: &str) {
        if let Some(inst) = self.inner.lock().unwrap().instances.get_mut(endpoint) {
            inst.alive = false;
        }
    }
}

impl WorkerClient for ScriptedCluster {
    fn dispatch(&self, endpoint: &str, spec: &JobSpec) -> Result<(), DispatchError> {
        let now = self.clock.now_ms();
        let mut guard = self.inner.lock().unwrap();
        let inner = &mut *guard;
        let inst = match inner.instances.get_mut(endpoint) {
            Some(i) if i.alive => i,
            _ => return Err(DispatchError::Failed(format!("{endpoint} unreachable"))),
        };
        if inner.rng.gen_bool(self.plan.busy_probability) || inst.running(now) >= inst.capacity {
            inner.busy_rejections += 1;
            return Err(DispatchError::Busy(None));
        }
        let (lo, hi) = self.plan.job_ms;
        let finish_at = now + inner.rng.gen_range(lo..=hi);
        let fails = inner.rng.gen_bool(self.plan.job_failure_probability);
        inst.jobs.insert(spec.job_id.clone(), FakeJob { finish_at, fails });
        inner.dispatches += 1;
        Ok(())
    }

    fn poll(&self, endpoint: &str, job_id: &str) -> Result<PollOutcome, String> {
        let now = self.clock.now_ms();
        let inner = self.inner.lock().unwrap();
        let inst = match inner.instances.get(endpoint) {
            Some(i) if i.alive => i,
            _ => return Err(format!("{endpoint} unreachable")),
        };
        let Some(job) = inst.jobs.get(job_id) else {
            return Ok(PollOutcome::Unknown);
        };
        if job.finish_at > now {
            return Ok(PollOutcome::Running);
        }
        let mut result = JobResult::failed(job_id, "injected job failure");
        if !job.fails {
            result.status = JobStatus::Succeeded;
            result.error = None;
        }
        Ok(PollOutcome::Done(Box::new(result)))
    }

    fn is_free(&self, endpoint: &str) -> Result<UtilizationReport, String> {
        let now = self.clock.now_ms();
        let inner = self.inner.lock().unwrap();
        let inst = match inner.instances.get(endpoint) {
            Some(i) if i.alive => i,
            _ => return Err(format!("{endpoint} unreachable")),
        };
        let used = inst.running(now);
        Ok(UtilizationReport {
            instance_id: inst.id.clone(),
            busy: used > 0,
            running_job: None,
            capacity_slots: inst.capacity,
            used_slots: used,
            uptime_s: 0.0,
            queue_accepting: used < inst.capacity,
        })
    }
}
