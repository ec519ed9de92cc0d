//! The discrete-event loop: arrivals, packed steps, completions.

use super::{step_time, CostModel, CostModelError, Event, EventKind, SimMetrics};
use crate::config::{ConfigError, ServeConfig};
use crate::harness::metrics::{compute_metrics, MetricsError};
use crate::harness::trace::TraceRecord;
use crate::membudget::{
    kv_pool_capacity, plan_logit_chunks, profile_peak_activation,
    profile_peak_activation_monolithic, MemError, MemoryPlan,
};
use crate::request::{DenoiseSchedule, Phase, Request};
use crate::scheduler::{LogitMode, SchedMode, SchedulerState};
use crate::sparse_kv::KvPool;
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid cost model: {0}")]
    Cost(#[from] CostModelError),
    #[error("memory plan: {0}")]
    Memory(#[from] MemError),
    #[error("trace is not sorted by arrival time at record {index}")]
    UnsortedTrace { index: usize },
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

/// Execution knobs for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub mode: SchedMode,
    pub logit_mode: LogitMode,
    /// Recorded in outputs; the event loop itself is deterministic.
    pub seed: u64,
}

impl SimOptions {
    pub fn new(mode: SchedMode) -> Self {
        Self {
            mode,
            logit_mode: LogitMode::ActiveBlock,
            seed: 0,
        }
    }
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub events: Vec<Event>,
    /// `None` when no request finished.
    pub metrics: Option<SimMetrics>,
    pub plan: MemoryPlan,
    /// Requests rejected at submission, with the reason.
    pub unschedulable: Vec<(u64, String)>,
    /// Invariant violations observed at runtime (empty on a healthy run).
    pub violations: Vec<String>,
    pub batches: u64,
    pub seed: u64,
}

fn deliver_due(
    pending: &mut VecDeque<Request>,
    state: &mut SchedulerState,
    cfg: &ServeConfig,
    events: &mut Vec<Event>,
    unschedulable: &mut Vec<(u64, String)>,
    upto: f64,
) {
    while pending.front().is_some_and(|r| r.arrival_time <= upto) {
        let req = pending.pop_front().expect("front exists");
        let mut ev = Event::blank(req.arrival_time, EventKind::Submit);
        ev.request_id = Some(req.id);
        ev.query_tokens = req.total_len() as u64;
        ev.gen_tokens = req.gen_length as u64;
        events.push(ev);
        let (id, arrival) = (req.id, req.arrival_time);
        if let Err(e) = state.submit(req, cfg) {
            let mut rj = Event::blank(arrival, EventKind::Reject);
            rj.request_id = Some(id);
            events.push(rj);
            unschedulable.push((id, e.to_string()));
        }
    }
}

/// Runs the event loop over a sorted arrival trace until every schedulable
/// request finishes. Deterministic given (trace, cfg, cm, options).
///
/// Arrivals are admitted only at step boundaries; all requests in a batch
/// advance together and the step takes one shared duration.
pub fn run_sim(
    trace: &[TraceRecord],
    cfg: &ServeConfig,
    cm: &CostModel,
    opts: SimOptions,
) -> Result<SimResult, SimError> {
    cfg.validate()?;
    cm.validate()?;
    if let Some(i) = trace
        .windows(2)
        .position(|w| w[1].arrival_time < w[0].arrival_time)
    {
        return Err(SimError::UnsortedTrace { index: i + 1 });
    }

    let activation = match opts.logit_mode {
        LogitMode::ActiveBlock => profile_peak_activation(cfg)?,
        LogitMode::AllQueryTokens => {
            profile_peak_activation_monolithic(cfg, 1, cfg.max_num_batched_tokens)?
        }
    };
    let plan = kv_pool_capacity(cfg, activation)?;
    let mut state =
        SchedulerState::new(opts.mode, opts.logit_mode, KvPool::new(plan.kv_token_slots));

    let mut pending: VecDeque<Request> = trace
        .iter()
        .enumerate()
        .map(|(i, r)| Request::new(i as u64, r.prompt_len, r.gen_length, r.arrival_time))
        .collect();

    let mut events: Vec<Event> = Vec::new();
    let mut unschedulable: Vec<(u64, String)> = Vec::new();
    let mut violations: Vec<String> = Vec::new();
    let mut now = 0.0_f64;
    let mut batches = 0u64;
    let mut finished_seen = 0usize;
    let sched = DenoiseSchedule::from_config(cfg);

    loop {
        deliver_due(
            &mut pending,
            &mut state,
            cfg,
            &mut events,
            &mut unschedulable,
            now,
        );
        let batch = state.build_step_batch(cfg);
        if batch.entries.is_empty() {
            match pending.front() {
                Some(next) => {
                    now = now.max(next.arrival_time);
                    continue;
                }
                None => break,
            }
        }
        if batch.total_query_tokens > cfg.max_num_batched_tokens {
            violations.push(format!(
                "batch {batches}: {} query tokens exceed budget {}",
                batch.total_query_tokens, cfg.max_num_batched_tokens
            ));
        }
        for &id in &batch.admitted {
            let mut ev = Event::blank(now, EventKind::Admit);
            ev.request_id = Some(id);
            events.push(ev);
        }
        for &id in &batch.stalled {
            let mut ev = Event::blank(now, EventKind::Stall);
            ev.request_id = Some(id);
            events.push(ev);
        }
        let mut steps_before: HashMap<u64, u32> = HashMap::new();
        let mut cache_sizes: HashMap<u64, u64> = HashMap::new();
        for req in state.running() {
            steps_before.insert(req.id, req.step);
            let slots = req.kv_handle.as_ref().expect("running holds KV").slots;
            cache_sizes.insert(req.id, slots);
        }
        let dt = step_time(&batch, &cache_sizes, cm, cfg);
        let completion = now + dt;
        // Arrivals landing inside this step join the queue for the next
        // iteration, logged at their true arrival times.
        deliver_due(
            &mut pending,
            &mut state,
            cfg,
            &mut events,
            &mut unschedulable,
            completion,
        );
        now = completion;

        let logit_chunks = match opts.logit_mode {
            LogitMode::ActiveBlock => {
                plan_logit_chunks(batch.total_logit_tokens, cfg.max_num_logits).len() as u64
            }
            LogitMode::AllQueryTokens => u64::from(batch.total_logit_tokens > 0),
        };
        let mut bev = Event::blank(now, EventKind::Batch);
        bev.step = Some(batches as u32);
        bev.query_tokens = batch.total_query_tokens;
        bev.logit_chunks = logit_chunks;
        bev.step_time = dt;
        events.push(bev);
        for entry in &batch.entries {
            let mut ev = Event::blank(now, EventKind::Step);
            ev.request_id = Some(entry.request_id);
            ev.step = steps_before.get(&entry.request_id).copied();
            ev.phase = Some(entry.phase);
            ev.query_tokens = entry.query_tokens;
            ev.reuse_bytes = if entry.phase == Phase::Reuse {
                cm.reuse_bytes(cache_sizes[&entry.request_id], cfg)
            } else {
                0
            };
            events.push(ev);
        }
        state.on_step_complete(&batch, cfg, now);
        for f in &state.finished()[finished_seen..] {
            let mut ev = Event::blank(now, EventKind::Finish);
            ev.request_id = Some(f.id);
            ev.step = Some(sched.total_steps(f.gen_length / cfg.block_size));
            ev.gen_tokens = f.gen_length as u64;
            events.push(ev);
        }
        finished_seen = state.finished().len();
        batches += 1;
    }

    let over_allocated = state.pool().allocated_slots() > state.pool().capacity_slots();
    if over_allocated {
        violations.push("KV pool over-allocated".into());
    }
    let metrics = if state.finished().is_empty() {
        None
    } else {
        Some(compute_metrics(&events, cfg.max_num_batched_tokens)?)
    };
    Ok(SimResult {
        events,
        metrics,
        plan,
        unschedulable,
        violations,
        batches,
        seed: opts.seed,
    })
}
