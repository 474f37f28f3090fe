//! Drives the scheduler against a simulated cluster with busy rejections,
//! failed starts, failing jobs and killed instances, then reports how the
//! jobs ended.
//!
//! Run with `cargo run --example scheduler_simulation`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nluforge::models::Hyperparams;
use nluforge::scheduler::scripted::{FaultPlan, ScriptedCluster};
use nluforge::scheduler::{Clock, InstanceConfig, ManualClock, PoolPolicy, Scheduler, SchedulerConfig};
use nluforge::worker::JobSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(ManualClock::new(0));
    let plan = FaultPlan {
        busy_probability: 0.1,
        start_failure_probability: 0.05,
        job_failure_probability: 0.05,
        job_ms: (500, 5_000),
    };
    let cluster = ScriptedCluster::new(plan, clock.clone(), 7);
    let config = SchedulerConfig {
        pool: PoolPolicy {
            min_ready: 1,
            max_instances: 4,
            scale_up_queue_threshold: 3,
            idle_shutdown_s: 30,
        },
        retry_cap: 3,
        heartbeat_timeout_ms: 3_000,
        instance_template: InstanceConfig {
            capacity_slots: 2,
            ..InstanceConfig::default()
        },
    };
    let sched = Scheduler::new(config, cluster.clone(), cluster.clone(), clock.clone())?;

    for k in 0..120 {
        sched.submit_job(JobSpec::train(format!("job-{k:03}"), "toy", Hyperparams::default()), None, None)?;
    }
    let mut peak = 0;
    for step in 0..2_000 {
        if step % 40 == 20 {
            if let Some(id) = cluster.kill_random() {
                println!("t={:>6}ms killed {id}", clock.now_ms());
            }
        }
        clock.advance(250);
        sched.tick();
        sched.check_invariants()?;
        let live = sched.instances().iter().filter(|i| i.state != nluforge::scheduler::InstanceState::Stopped).count();
        peak = peak.max(live);
        if sched.jobs().iter().all(|j| j.state.is_terminal()) {
            println!("all jobs settled after {step} ticks");
            break;
        }
    }
    let mut by_state: BTreeMap<String, usize> = BTreeMap::new();
    for j in sched.jobs() {
        *by_state.entry(j.state.to_string()).or_default() += 1;
    }
    let (dispatches, busy, kills) = cluster.stats();
    println!("final states {by_state:?}");
    println!("{dispatches} dispatches, {busy} busy rejections, {kills} kills, peak {peak} live instances");
    Ok(())
}
