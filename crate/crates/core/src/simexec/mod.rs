//! Discrete-event executor with a phase-aware cost model.
//!
//! Simulated step time charges Refresh work against compute, Reuse work
//! against memory bandwidth, and the output projection against compute in
//! serialized logit chunks. Absolute times are synthetic; only the relative
//! weights are meaningful.

mod engine;
pub mod verify;

pub use engine::{run_sim, SimError, SimOptions, SimResult};

use crate::config::ServeConfig;
use crate::membudget::plan_logit_chunks;
use crate::request::Phase;
use crate::scheduler::StepBatch;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

/// Coefficients of the synthetic step-time model.
///
/// A Refresh request of sequence length L costs `L * 2 * L * hidden_dim *
/// attn_flops_coeff` FLOPs (full-sequence attention plus MLP proxy, one term
/// per query token). A Reuse request reads its packed cache of k retained
/// tokens: `2 * heads * k * head_dim * elem * layers` bytes. Each logit
/// chunk of c tokens costs `c * hidden_dim * vocab * 2` FLOPs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub attn_flops_coeff: f64,
    /// Seconds of fixed per-step overhead (launch, host control flow).
    pub fixed_step_overhead: f64,
}

impl CostModel {
    /// Documented preset: chosen so a full-length Refresh dominates a Reuse
    /// step by more than an order of magnitude at L = 2048.
    pub fn default_preset() -> Self {
        Self {
            attn_flops_coeff: 16.0,
            fixed_step_overhead: 3e-3,
        }
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.attn_flops_coeff.is_nan() || self.attn_flops_coeff <= 0.0 {
            return Err(CostModelError::NonPositive("attn_flops_coeff"));
        }
        if self.fixed_step_overhead.is_nan() || self.fixed_step_overhead <= 0.0 {
            return Err(CostModelError::NonPositive("fixed_step_overhead"));
        }
        Ok(())
    }

    /// FLOPs one Refresh request of `total_len` query tokens costs.
    pub fn refresh_flops(&self, total_len: u64, cfg: &ServeConfig) -> f64 {
        let per_token = 2.0 * total_len as f64 * cfg.hidden_dim as f64 * self.attn_flops_coeff;
        total_len as f64 * per_token
    }

    /// Bytes one Reuse request reads from its packed cache of `retained`
    /// tokens.
    pub fn reuse_bytes(&self, retained: u64, cfg: &ServeConfig) -> u64 {
        2 * cfg.num_heads * retained * cfg.head_dim * cfg.bytes_per_element * cfg.num_layers
    }

    /// FLOPs of one logit chunk of `chunk` tokens.
    pub fn logit_flops(&self, chunk: u64, cfg: &ServeConfig) -> f64 {
        chunk as f64 * cfg.hidden_dim as f64 * cfg.vocab_size as f64 * 2.0
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::default_preset()
    }
}

/// Simulated duration of one packed step.
///
/// `cache_sizes` maps request id to its retained-token count, consulted for
/// Reuse entries.
pub fn step_time(
    batch: &StepBatch,
    cache_sizes: &HashMap<u64, u64>,
    cm: &CostModel,
    cfg: &ServeConfig,
) -> f64 {
    let mut compute_flops = 0.0;
    let mut bytes = 0u64;
    for entry in &batch.entries {
        match entry.phase {
            Phase::Refresh => compute_flops += cm.refresh_flops(entry.query_tokens, cfg),
            Phase::Reuse => {
                let retained = *cache_sizes
                    .get(&entry.request_id)
                    .expect("reuse entry has a cache size");
                bytes += cm.reuse_bytes(retained, cfg);
            }
            other => unreachable!("batched entry in phase {other}"),
        }
    }
    for chunk in plan_logit_chunks(batch.total_logit_tokens, cfg.max_num_logits) {
        compute_flops += cm.logit_flops(chunk, cfg);
    }
    compute_flops / cfg.hw.compute_rate
        + bytes as f64 / cfg.hw.mem_bandwidth
        + cm.fixed_step_overhead
}

/// Kinds of records in the simulation event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// A request entered the waiting queue (stamped at its arrival time).
    Submit,
    /// A request could never be scheduled and was turned away.
    Reject,
    /// A request moved from waiting to running.
    Admit,
    /// A running request's contribution did not fit; it skipped this step.
    Stall,
    /// One request executed one denoising step.
    Step,
    /// One packed batch executed.
    Batch,
    /// A request completed all its steps.
    Finish,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventKind::Submit => "submit",
            EventKind::Reject => "reject",
            EventKind::Admit => "admit",
            EventKind::Stall => "stall",
            EventKind::Step => "step",
            EventKind::Batch => "batch",
            EventKind::Finish => "finish",
        };
        f.write_str(s)
    }
}

/// One line of the event log. Unused fields are zero / empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub request_id: Option<u64>,
    /// Request step for `Step`/`Finish`, batch index for `Batch`.
    pub step: Option<u32>,
    pub phase: Option<Phase>,
    pub query_tokens: u64,
    pub logit_chunks: u64,
    /// Generated tokens (set on `Submit` and `Finish`).
    pub gen_tokens: u64,
    /// Packed-cache bytes read by this step (Reuse entries only).
    pub reuse_bytes: u64,
    /// Simulated duration (set on `Batch`).
    pub step_time: f64,
}

impl Event {
    pub(crate) fn blank(time: f64, kind: EventKind) -> Self {
        Self {
            time,
            kind,
            request_id: None,
            step: None,
            phase: None,
            query_tokens: 0,
            logit_chunks: 0,
            gen_tokens: 0,
            reuse_bytes: 0,
            step_time: 0.0,
        }
    }
}

/// Per-request latency line plus run-level aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestMetric {
    pub id: u64,
    pub arrival: f64,
    pub finish: f64,
    pub latency: f64,
    pub gen_tokens: u64,
}

/// Run-level serving metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub per_request: Vec<RequestMetric>,
    /// Generated tokens per second of makespan.
    pub throughput: f64,
    pub latency_mean: f64,
    /// Population standard deviation of latency.
    pub latency_std: f64,
    /// max - min latency.
    pub tail_span: f64,
    pub total_generated_tokens: u64,
    /// Last finish minus first arrival.
    pub makespan: f64,
    /// Per-batch query-token budget utilization in [0, 1].
    pub utilization: Vec<f64>,
}
