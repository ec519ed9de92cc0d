//! Per-request denoising lifecycle: the Refresh/Reuse step schedule, token
//! accounting, and step advancement.
//!
//! A request denoises its sequence block by block. Each block gets
//! `steps_per_block` consecutive steps. The first step of a block refreshes
//! QKV over the whole sequence; with a finite refresh interval every
//! interval-th step inside the block refreshes as well; every other step
//! reuses cached context KV and touches only the active block.

use crate::config::ServeConfig;
use crate::sparse_kv::KvHandle;
use std::fmt;
use thiserror::Error;

/// Lifecycle phase of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Waiting,
    Refresh,
    Reuse,
    Finished,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Waiting => "waiting",
            Phase::Refresh => "refresh",
            Phase::Reuse => "reuse",
            Phase::Finished => "finished",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("request {0} is already finished")]
    AlreadyFinished(u64),
    #[error("request {0} has not been admitted")]
    NotAdmitted(u64),
}

/// Refresh/Reuse step pattern derived from the configuration.
///
/// The pattern is periodic in the step index with period `steps_per_block`,
/// so phase is a pure function of (step, config). Only the total step count
/// depends on a request's own generation length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiseSchedule {
    pub steps_per_block: u32,
    pub refresh_interval: Option<u32>,
}

impl DenoiseSchedule {
    /// Requires a validated config (integral steps-per-block).
    pub fn from_config(cfg: &ServeConfig) -> Self {
        let steps_per_block =
            (cfg.num_steps as u64 * cfg.block_size as u64 / cfg.gen_length as u64) as u32;
        Self {
            steps_per_block,
            refresh_interval: cfg.refresh_interval,
        }
    }

    pub fn is_refresh_step(&self, step: u32) -> bool {
        let offset = step % self.steps_per_block;
        if offset == 0 {
            return true; // block entry
        }
        match self.refresh_interval {
            Some(k) => offset.is_multiple_of(k),
            None => false,
        }
    }

    pub fn block_of(&self, step: u32) -> u32 {
        step / self.steps_per_block
    }

    pub fn total_steps(&self, num_blocks: u32) -> u32 {
        self.steps_per_block * num_blocks
    }

    /// All refresh step indices for a request of `num_blocks` blocks.
    pub fn refresh_steps(&self, num_blocks: u32) -> Vec<u32> {
        (0..self.total_steps(num_blocks))
            .filter(|&s| self.is_refresh_step(s))
            .collect()
    }
}

/// One generation job's lifecycle state.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub prompt_len: u32,
    pub gen_length: u32,
    /// Simulation seconds.
    pub arrival_time: f64,
    /// Current denoising step, 0-based.
    pub step: u32,
    /// Current active block, 0-based.
    pub block_index: u32,
    pub phase: Phase,
    /// Present iff the request is running; attached by the scheduler on
    /// admission and released on completion.
    pub kv_handle: Option<KvHandle>,
}

impl Request {
    pub fn new(id: u64, prompt_len: u32, gen_length: u32, arrival_time: f64) -> Self {
        Self {
            id,
            prompt_len,
            gen_length,
            arrival_time,
            step: 0,
            block_index: 0,
            phase: Phase::Waiting,
            kv_handle: None,
        }
    }

    pub fn total_len(&self) -> u32 {
        self.prompt_len + self.gen_length
    }

    pub fn num_blocks(&self, cfg: &ServeConfig) -> u32 {
        self.gen_length / cfg.block_size
    }

    /// Steps this request runs in total; equals `cfg.num_steps` when the
    /// request generates `cfg.gen_length` tokens, proportionally fewer for
    /// shorter requests.
    pub fn total_steps(&self, cfg: &ServeConfig) -> u32 {
        DenoiseSchedule::from_config(cfg).total_steps(self.num_blocks(cfg))
    }
}

/// Phase the request executes at its current step.
pub fn phase_at_step(req: &Request, cfg: &ServeConfig) -> Result<Phase, StepError> {
    if req.phase == Phase::Finished {
        return Err(StepError::AlreadyFinished(req.id));
    }
    let sched = DenoiseSchedule::from_config(cfg);
    Ok(if sched.is_refresh_step(req.step) {
        Phase::Refresh
    } else {
        Phase::Reuse
    })
}

/// Query tokens the request contributes to the packed batch in `phase`:
/// the whole sequence when refreshing, the active block when reusing.
///
/// Prompt processing is folded into the first refresh step, which already
/// touches the full sequence; there is no separate prefill stage.
pub fn query_tokens(req: &Request, phase: Phase, cfg: &ServeConfig) -> u64 {
    match phase {
        Phase::Refresh => req.total_len() as u64,
        Phase::Reuse => cfg.block_size as u64,
        other => panic!("query_tokens called with inactive phase {other}"),
    }
}

/// Tokens needing a decode decision this step: the active block's positions,
/// in both phases.
pub fn logit_tokens(_req: &Request, phase: Phase, cfg: &ServeConfig) -> u64 {
    match phase {
        Phase::Refresh | Phase::Reuse => cfg.block_size as u64,
        other => panic!("logit_tokens called with inactive phase {other}"),
    }
}

/// Advances the request by one denoising step, recomputing block index and
/// phase; transitions to `Finished` when the last step completes.
pub fn advance(mut req: Request, cfg: &ServeConfig) -> Result<Request, StepError> {
    match req.phase {
        Phase::Refresh | Phase::Reuse => {}
        Phase::Finished => return Err(StepError::AlreadyFinished(req.id)),
        Phase::Waiting => return Err(StepError::NotAdmitted(req.id)),
    }
    let sched = DenoiseSchedule::from_config(cfg);
    let total = sched.total_steps(req.num_blocks(cfg));
    req.step += 1;
    if req.step >= total {
        req.step = total;
        req.block_index = req.num_blocks(cfg);
        req.phase = Phase::Finished;
    } else {
        req.block_index = sched.block_of(req.step);
        req.phase = if sched.is_refresh_step(req.step) {
            Phase::Refresh
        } else {
            Phase::Reuse
        };
    }
    Ok(req)
}
