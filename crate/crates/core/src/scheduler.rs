//! Phase-multiplexed greedy FCFS scheduler.
//!
//! Each denoising iteration builds one packed batch whose total query tokens
//! never exceed `max_num_batched_tokens`. Requests in Refresh contribute
//! their full sequence, requests in Reuse only the active block; waiting
//! requests are admitted head-of-line into whatever headroom the transition
//! to Reuse released. KV slots are reserved at admission and held until
//! completion.

use crate::config::ServeConfig;
use crate::membudget::kv_request_slots;
use crate::request::{advance, phase_at_step, query_tokens, Phase, Request};
use crate::sparse_kv::KvPool;
use std::collections::{HashSet, VecDeque};
use thiserror::Error;

/// Scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedMode {
    /// Charge each request its current phase's query tokens.
    PhaseMultiplexed,
    /// Charge each running request its full sequence regardless of phase,
    /// modeling request-level provisioning for the worst-case step.
    RequestLevelStatic,
}

/// How many tokens need logits each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitMode {
    /// Only the active block's positions are decoded.
    ActiveBlock,
    /// Logits materialize for every query token, as in an engine without a
    /// selective output projection.
    AllQueryTokens,
}

#[derive(Debug, Error, PartialEq)]
pub enum SubmitError {
    #[error("request {id}: {total_len} tokens exceed the batch budget {budget}")]
    OversizeTokens {
        id: u64,
        total_len: u32,
        budget: u64,
    },
    #[error("request {id}: needs {slots} KV slots, pool capacity is {capacity}")]
    OversizeKv { id: u64, slots: u64, capacity: u64 },
}

/// One request's contribution to a packed step batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub request_id: u64,
    pub phase: Phase,
    /// Tokens charged against the batch budget.
    pub query_tokens: u64,
    pub logit_tokens: u64,
    /// Cumulative query offset of this entry in the packed layout.
    pub query_offset: u64,
}

/// One denoising iteration's packed work unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepBatch {
    /// Entries in admission order.
    pub entries: Vec<BatchEntry>,
    pub total_query_tokens: u64,
    pub total_logit_tokens: u64,
    /// Requests admitted from the waiting queue while building this batch.
    pub admitted: Vec<u64>,
    /// Running requests left out because their contribution no longer fit;
    /// they do not advance this iteration.
    pub stalled: Vec<u64>,
}

/// A completed request's accounting record.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishedRequest {
    pub id: u64,
    pub arrival_time: f64,
    pub finish_time: f64,
    pub prompt_len: u32,
    pub gen_length: u32,
}

#[derive(Debug)]
pub struct SchedulerState {
    mode: SchedMode,
    logit_mode: LogitMode,
    waiting: VecDeque<Request>,
    running: Vec<Request>,
    pool: KvPool,
    finished: Vec<FinishedRequest>,
}

impl SchedulerState {
    pub fn new(mode: SchedMode, logit_mode: LogitMode, pool: KvPool) -> Self {
        Self {
            mode,
            logit_mode,
            waiting: VecDeque::new(),
            running: Vec::new(),
            pool,
            finished: Vec::new(),
        }
    }

    pub fn mode(&self) -> SchedMode {
        self.mode
    }

    pub fn running(&self) -> &[Request] {
        &self.running
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn finished(&self) -> &[FinishedRequest] {
        &self.finished
    }

    pub fn pool(&self) -> &KvPool {
        &self.pool
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    /// Enqueues a request that can be scheduled at all; requests that could
    /// never fit the token budget or the whole pool are rejected up front.
    /// The queue stays ordered by (arrival_time, id).
    pub fn submit(&mut self, req: Request, cfg: &ServeConfig) -> Result<(), SubmitError> {
        let total_len = req.total_len();
        if total_len as u64 > cfg.max_num_batched_tokens {
            return Err(SubmitError::OversizeTokens {
                id: req.id,
                total_len,
                budget: cfg.max_num_batched_tokens,
            });
        }
        let slots = kv_request_slots(total_len, cfg);
        if slots > self.pool.capacity_slots() {
            return Err(SubmitError::OversizeKv {
                id: req.id,
                slots,
                capacity: self.pool.capacity_slots(),
            });
        }
        let key = (req.arrival_time, req.id);
        let pos = self
            .waiting
            .iter()
            .position(|r| (r.arrival_time, r.id) > key)
            .unwrap_or(self.waiting.len());
        self.waiting.insert(pos, req);
        Ok(())
    }

    fn charge_for(&self, req: &Request, phase: Phase, cfg: &ServeConfig) -> u64 {
        match self.mode {
            SchedMode::PhaseMultiplexed => query_tokens(req, phase, cfg),
            SchedMode::RequestLevelStatic => req.total_len() as u64,
        }
    }

    fn logit_tokens_for(&self, charged: u64, cfg: &ServeConfig) -> u64 {
        match self.logit_mode {
            LogitMode::ActiveBlock => cfg.block_size as u64,
            LogitMode::AllQueryTokens => charged,
        }
    }

    /// Builds the packed batch for the next iteration.
    ///
    /// Running requests are packed first, in admission order; one whose
    /// contribution no longer fits (several requests refreshing at once can
    /// outgrow the budget that admitted them) is stalled for this iteration
    /// rather than violating the cap. Admission from the waiting queue is
    /// strictly head-of-line against both the token budget and the KV pool,
    /// and is suspended entirely while anything is stalled so delayed
    /// refreshes cannot starve.
    pub fn build_step_batch(&mut self, cfg: &ServeConfig) -> StepBatch {
        let mut batch = StepBatch::default();
        for req in &self.running {
            let phase = phase_at_step(req, cfg).expect("running request is active");
            let charged = self.charge_for(req, phase, cfg);
            if batch.total_query_tokens + charged > cfg.max_num_batched_tokens {
                batch.stalled.push(req.id);
                continue;
            }
            let logit_tokens = self.logit_tokens_for(charged, cfg);
            batch.entries.push(BatchEntry {
                request_id: req.id,
                phase,
                query_tokens: charged,
                logit_tokens,
                query_offset: batch.total_query_tokens,
            });
            batch.total_query_tokens += charged;
            batch.total_logit_tokens += logit_tokens;
        }
        if batch.stalled.is_empty() {
            while let Some(head) = self.waiting.front() {
                // A newly admitted request starts at step 0, a Refresh step,
                // so its first contribution is the full sequence under
                // either mode.
                let charged = head.total_len() as u64;
                if batch.total_query_tokens + charged > cfg.max_num_batched_tokens {
                    break;
                }
                let slots = kv_request_slots(head.total_len(), cfg);
                if slots > self.pool.free_slots() {
                    break;
                }
                let mut req = self.waiting.pop_front().expect("head exists");
                let handle = self
                    .pool
                    .alloc(req.id, slots)
                    .expect("free slot count was just checked");
                req.kv_handle = Some(handle);
                req.phase = Phase::Refresh;
                let logit_tokens = self.logit_tokens_for(charged, cfg);
                batch.entries.push(BatchEntry {
                    request_id: req.id,
                    phase: Phase::Refresh,
                    query_tokens: charged,
                    logit_tokens,
                    query_offset: batch.total_query_tokens,
                });
                batch.total_query_tokens += charged;
                batch.total_logit_tokens += logit_tokens;
                batch.admitted.push(req.id);
                self.running.push(req);
            }
        }
        debug_assert!(batch.total_query_tokens <= cfg.max_num_batched_tokens);
        batch
    }

    /// Advances every batched request by one step; finished requests release
    /// their KV reservation and move to the finished list stamped with `now`.
    pub fn on_step_complete(&mut self, batch: &StepBatch, cfg: &ServeConfig, now: f64) {
        let in_batch: HashSet<u64> = batch.entries.iter().map(|e| e.request_id).collect();
        let mut still_running = Vec::with_capacity(self.running.len());
        for req in self.running.drain(..) {
            if !in_batch.contains(&req.id) {
                still_running.push(req);
                continue;
            }
            let mut next = advance(req, cfg).expect("batched request is active");
            if next.phase == Phase::Finished {
                if let Some(handle) = next.kv_handle.take() {
                    self.pool.free(handle).expect("handle is live");
                }
                self.finished.push(FinishedRequest {
                    id: next.id,
                    arrival_time: next.arrival_time,
                    finish_time: now,
                    prompt_len: next.prompt_len,
                    gen_length: next.gen_length,
                });
            } else {
                still_running.push(next);
            }
        }
        self.running = still_running;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ServeConfig {
        // budget 100, single-block requests: gen 32 over 32 steps.
        ServeConfig {
            max_num_batched_tokens: 100,
            gen_length: 32,
            num_steps: 32,
            block_size: 32,
            retention_ratio: 1.0,
            ..ServeConfig::default()
        }
    }

    fn state(cfg: &ServeConfig, slots: u64) -> SchedulerState {
        let _ = cfg;
        SchedulerState::new(
            SchedMode::PhaseMultiplexed,
            LogitMode::ActiveBlock,
            KvPool::new(slots),
        )
    }

    fn ids(batch: &StepBatch) -> Vec<u64> {
        batch.entries.iter().map(|e| e.request_id).collect()
    }

    #[test]
    fn reuse_headroom_admits_in_fcfs_order() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        // A: prompt 0, gen 32 (total 32); admitted and advanced to a Reuse step.
        st.submit(Request::new(0, 0, 32, 0.0), &cfg).unwrap();
        let b0 = st.build_step_batch(&cfg);
        assert_eq!(ids(&b0), vec![0]);
        st.on_step_complete(&b0, &cfg, 1.0);
        // B total 60 and C total 32 arrive later.
        st.submit(Request::new(1, 28, 32, 0.5), &cfg).unwrap();
        st.submit(Request::new(2, 0, 32, 0.6), &cfg).unwrap();
        let b1 = st.build_step_batch(&cfg);
        // A reuses (32), B refreshes (60): 92 <= 100; C (32) would hit 124.
        assert_eq!(ids(&b1), vec![0, 1]);
        assert_eq!(b1.entries[0].query_tokens, 32);
        assert_eq!(b1.entries[1].query_tokens, 60);
        assert_eq!(b1.total_query_tokens, 92);
        assert_eq!(b1.admitted, vec![1]);
    }

    #[test]
    fn refresh_head_blocks_queue_strictly() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        // A total 80 in Refresh; B total 60 does not fit; C total 33 is
        // blocked behind B even though it would fit.
        st.submit(Request::new(0, 48, 32, 0.0), &cfg).unwrap();
        st.submit(Request::new(1, 28, 32, 0.1), &cfg).unwrap();
        st.submit(Request::new(2, 1, 32, 0.2), &cfg).unwrap();
        let b = st.build_step_batch(&cfg);
        assert_eq!(ids(&b), vec![0]);
        assert_eq!(b.total_query_tokens, 80);
        assert_eq!(st.waiting_len(), 2);
    }

    #[test]
    fn empty_state_yields_empty_batch() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 16);
        let b = st.build_step_batch(&cfg);
        assert!(b.entries.is_empty());
        assert_eq!(b.total_query_tokens, 0);
    }

    #[test]
    fn submit_orders_equal_arrivals_by_id() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        st.submit(Request::new(7, 0, 32, 1.0), &cfg).unwrap();
        st.submit(Request::new(3, 0, 32, 1.0), &cfg).unwrap();
        let b = st.build_step_batch(&cfg);
        assert_eq!(b.admitted, vec![3, 7]);
    }

    #[test]
    fn submit_boundary_sizes() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        st.submit(Request::new(0, 68, 32, 0.0), &cfg).unwrap(); // exactly 100
        let err = st.submit(Request::new(1, 69, 32, 0.0), &cfg).unwrap_err();
        assert_eq!(
            err,
            SubmitError::OversizeTokens {
                id: 1,
                total_len: 101,
                budget: 100
            }
        );
    }

    #[test]
    fn submit_rejects_requests_larger_than_pool() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10);
        let err = st.submit(Request::new(0, 0, 32, 0.0), &cfg).unwrap_err();
        assert_eq!(
            err,
            SubmitError::OversizeKv {
                id: 0,
                slots: 32,
                capacity: 10
            }
        );
    }

    #[test]
    fn pool_exhaustion_keeps_head_waiting() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 40);
        st.submit(Request::new(0, 0, 32, 0.0), &cfg).unwrap();
        st.submit(Request::new(1, 0, 32, 0.1), &cfg).unwrap();
        let b = st.build_step_batch(&cfg);
        // Second request fits the token budget (64 <= 100) but not the pool.
        assert_eq!(b.admitted, vec![0]);
        assert_eq!(st.waiting_len(), 1);
        assert_eq!(st.pool().free_slots(), 8);
    }

    #[test]
    fn finish_releases_pool_slots() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 64);
        st.submit(Request::new(0, 0, 32, 0.0), &cfg).unwrap();
        let mut now = 0.0;
        for _ in 0..32 {
            let b = st.build_step_batch(&cfg);
            assert_eq!(b.entries.len(), 1);
            now += 1.0;
            st.on_step_complete(&b, &cfg, now);
        }
        assert!(st.is_idle());
        assert_eq!(st.pool().free_slots(), 64);
        assert_eq!(st.finished().len(), 1);
        assert_eq!(st.finished()[0].finish_time, 32.0);
    }

    #[test]
    fn refresh_to_reuse_transition_frees_exact_headroom() {
        // Two-step replay: A refreshes with 100 tokens, then reuses with 32,
        // freeing 68 which admits B of exactly that size.
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        st.submit(Request::new(0, 68, 32, 0.0), &cfg).unwrap();
        let b0 = st.build_step_batch(&cfg);
        assert_eq!(b0.total_query_tokens, 100);
        st.on_step_complete(&b0, &cfg, 1.0);
        st.submit(Request::new(1, 36, 32, 0.5), &cfg).unwrap();
        let b1 = st.build_step_batch(&cfg);
        assert_eq!(ids(&b1), vec![0, 1]);
        assert_eq!(b1.total_query_tokens, 32 + 68);
    }

    #[test]
    fn no_transitions_keeps_membership_fixed() {
        let cfg = ServeConfig {
            max_num_batched_tokens: 100,
            gen_length: 32,
            num_steps: 32,
            block_size: 32,
            retention_ratio: 1.0,
            refresh_interval: None,
            ..ServeConfig::default()
        };
        let mut st = state(&cfg, 10_000);
        st.submit(Request::new(0, 8, 32, 0.0), &cfg).unwrap();
        st.submit(Request::new(1, 8, 32, 0.0), &cfg).unwrap();
        let b0 = st.build_step_batch(&cfg);
        st.on_step_complete(&b0, &cfg, 1.0);
        let b1 = st.build_step_batch(&cfg);
        st.on_step_complete(&b1, &cfg, 2.0);
        let b2 = st.build_step_batch(&cfg);
        assert_eq!(ids(&b1), ids(&b2));
    }

    #[test]
    fn static_mode_charges_total_len_in_every_phase() {
        let cfg = small_cfg();
        let mut st = SchedulerState::new(
            SchedMode::RequestLevelStatic,
            LogitMode::ActiveBlock,
            KvPool::new(10_000),
        );
        st.submit(Request::new(0, 28, 32, 0.0), &cfg).unwrap();
        let b0 = st.build_step_batch(&cfg);
        assert_eq!(b0.total_query_tokens, 60);
        st.on_step_complete(&b0, &cfg, 1.0);
        let b1 = st.build_step_batch(&cfg);
        // Reuse step, still charged 60.
        assert_eq!(b1.entries[0].phase, Phase::Reuse);
        assert_eq!(b1.entries[0].query_tokens, 60);
    }

    #[test]
    fn synchronized_refreshes_stall_instead_of_violating_budget() {
        // Reuse headroom admits eight 40-token requests over the first few
        // steps, but when the first cohort re-enters Refresh the running set
        // would need 2*40 + 6*8 = 128 > 100 tokens.
        let cfg = ServeConfig {
            max_num_batched_tokens: 100,
            gen_length: 64,
            num_steps: 64,
            block_size: 8,
            retention_ratio: 1.0,
            ..ServeConfig::default()
        };
        let mut st = state(&cfg, 10_000);
        for id in 0..10 {
            st.submit(Request::new(id, 8, 32, id as f64 * 0.01), &cfg)
                .unwrap();
        }
        let mut now = 0.0;
        let mut saw_stall = false;
        for _ in 0..200 {
            let b = st.build_step_batch(&cfg);
            if b.entries.is_empty() && st.is_idle() {
                break;
            }
            assert!(b.total_query_tokens <= cfg.max_num_batched_tokens);
            saw_stall |= !b.stalled.is_empty();
            now += 1.0;
            st.on_step_complete(&b, &cfg, now);
        }
        assert!(saw_stall, "expected at least one delayed refresh");
        assert_eq!(st.finished().len(), 10);
    }

    #[test]
    fn logit_tokens_add_up_across_the_batch() {
        let cfg = ServeConfig {
            max_num_batched_tokens: 1000,
            gen_length: 32,
            num_steps: 32,
            block_size: 32,
            retention_ratio: 1.0,
            ..ServeConfig::default()
        };
        let mut st = state(&cfg, 10_000);
        for id in 0..4 {
            st.submit(Request::new(id, 0, 32, 0.0), &cfg).unwrap();
        }
        let b = st.build_step_batch(&cfg);
        assert_eq!(b.entries.len(), 4);
        assert!(b.entries.iter().all(|e| e.logit_tokens == 32));
        assert_eq!(b.total_logit_tokens, 128);
    }

    #[test]
    fn offsets_are_cumulative_and_strictly_increasing() {
        let cfg = small_cfg();
        let mut st = state(&cfg, 10_000);
        st.submit(Request::new(0, 0, 32, 0.0), &cfg).unwrap();
        st.submit(Request::new(1, 4, 32, 0.1), &cfg).unwrap();
        let b = st.build_step_batch(&cfg);
        assert_eq!(b.entries[0].query_offset, 0);
        assert_eq!(b.entries[1].query_offset, 32);
        assert!(b
            .entries
            .windows(2)
            .all(|w| w[0].query_offset < w[1].query_offset));
    }
}
