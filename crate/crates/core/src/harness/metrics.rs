//! Metrics computation and CSV export.

use crate::membudget::MemoryPlan;
use crate::simexec::{Event, EventKind, RequestMetric, SimMetrics};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no data: the event log contains no finished request")]
    NoData,
    #[error("incomplete log: {0} submitted requests neither finished nor rejected")]
    Incomplete(usize),
    #[error("finish event for request {0} without a matching submit")]
    OrphanFinish(u64),
}

/// Derives run metrics from a complete event log.
///
/// Latency is finish minus arrival; throughput divides generated tokens by
/// the span from first arrival to last finish; the deviation is the
/// population standard deviation (divide by n); tail span is max minus min
/// latency. `token_budget` scales the per-batch utilization trace.
pub fn compute_metrics(events: &[Event], token_budget: u64) -> Result<SimMetrics, MetricsError> {
    let mut submits: HashMap<u64, (f64, u64)> = HashMap::new();
    let mut rejected = 0usize;
    let mut per_request: Vec<RequestMetric> = Vec::new();
    let mut utilization = Vec::new();
    for ev in events {
        match ev.kind {
            EventKind::Submit => {
                let id = ev.request_id.expect("submit has a request");
                submits.insert(id, (ev.time, ev.gen_tokens));
            }
            EventKind::Reject => rejected += 1,
            EventKind::Finish => {
                let id = ev.request_id.expect("finish has a request");
                let (arrival, gen_tokens) = submits
                    .get(&id)
                    .copied()
                    .ok_or(MetricsError::OrphanFinish(id))?;
                per_request.push(RequestMetric {
                    id,
                    arrival,
                    finish: ev.time,
                    latency: ev.time - arrival,
                    gen_tokens: gen_tokens.max(ev.gen_tokens),
                });
            }
            EventKind::Batch => {
                utilization.push(ev.query_tokens as f64 / token_budget as f64);
            }
            _ => {}
        }
    }
    if per_request.is_empty() {
        return Err(MetricsError::NoData);
    }
    let unresolved = submits.len() - rejected - per_request.len();
    if unresolved != 0 {
        return Err(MetricsError::Incomplete(unresolved));
    }
    let n = per_request.len() as f64;
    let first_arrival = per_request
        .iter()
        .map(|r| r.arrival)
        .fold(f64::INFINITY, f64::min);
    let last_finish = per_request
        .iter()
        .map(|r| r.finish)
        .fold(f64::NEG_INFINITY, f64::max);
    let makespan = last_finish - first_arrival;
    let total_generated_tokens: u64 = per_request.iter().map(|r| r.gen_tokens).sum();
    let latency_mean = per_request.iter().map(|r| r.latency).sum::<f64>() / n;
    let variance = per_request
        .iter()
        .map(|r| (r.latency - latency_mean).powi(2))
        .sum::<f64>()
        / n;
    let min_latency = per_request
        .iter()
        .map(|r| r.latency)
        .fold(f64::INFINITY, f64::min);
    let max_latency = per_request
        .iter()
        .map(|r| r.latency)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SimMetrics {
        per_request,
        throughput: total_generated_tokens as f64 / makespan,
        latency_mean,
        latency_std: variance.sqrt(),
        tail_span: max_latency - min_latency,
        total_generated_tokens,
        makespan,
        utilization,
    })
}

/// Event log as line-delimited CSV.
pub fn event_log_csv(events: &[Event]) -> String {
    let mut out = String::from(
        "time,event,request_id,step,phase,query_tokens,logit_chunks,gen_tokens,reuse_bytes,step_time\n",
    );
    for ev in events {
        let request_id = ev.request_id.map(|v| v.to_string()).unwrap_or_default();
        let step = ev.step.map(|v| v.to_string()).unwrap_or_default();
        let phase = ev.phase.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            ev.time,
            ev.kind,
            request_id,
            step,
            phase,
            ev.query_tokens,
            ev.logit_chunks,
            ev.gen_tokens,
            ev.reuse_bytes,
            ev.step_time
        ));
    }
    out
}

/// Metrics as CSV: one row per request, then a `#`-prefixed summary block
/// carrying the run's seed and memory plan.
pub fn metrics_csv(metrics: &SimMetrics, seed: u64, plan: &MemoryPlan) -> String {
    let mut out = String::from("request_id,arrival_time,finish_time,latency,gen_tokens\n");
    for r in &metrics.per_request {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id, r.arrival, r.finish, r.latency, r.gen_tokens
        ));
    }
    out.push_str("# summary\n");
    out.push_str(&format!("# seed = {seed}\n"));
    out.push_str(&format!("# requests = {}\n", metrics.per_request.len()));
    out.push_str(&format!(
        "# total_generated_tokens = {}\n",
        metrics.total_generated_tokens
    ));
    out.push_str(&format!("# makespan_s = {}\n", metrics.makespan));
    out.push_str(&format!(
        "# throughput_tok_per_s = {}\n",
        metrics.throughput
    ));
    out.push_str(&format!("# latency_mean_s = {}\n", metrics.latency_mean));
    out.push_str(&format!("# latency_std_s = {}\n", metrics.latency_std));
    out.push_str(&format!("# tail_span_s = {}\n", metrics.tail_span));
    out.push_str(&format!(
        "# activation_budget_bytes = {}\n",
        plan.activation_budget_bytes
    ));
    out.push_str(&format!("# kv_pool_bytes = {}\n", plan.kv_pool_bytes));
    out.push_str(&format!("# kv_token_slots = {}\n", plan.kv_token_slots));
    out
}
