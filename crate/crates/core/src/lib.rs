//! Desk-scale serving engine core and discrete-event simulator for
//! diffusion-LLM inference.
//!
//! The library models the serving-side mechanics of block-diffusion language
//! models: per-step Refresh/Reuse phase tracking ([`request`]), an analytic
//! memory model with bounded logit chunking ([`membudget`]), head-centric
//! sparse KV selection and packing with reference attention kernels
//! ([`sparse_kv`]), token-budget packed scheduling ([`scheduler`]), a
//! cost-model executor ([`simexec`]), and workload/report tooling
//! ([`harness`]). No GPU, no weights: real tensors appear only in the tiny
//! numeric verification path.

pub mod config;
pub mod harness;
pub mod membudget;
pub mod request;
pub mod scheduler;
pub mod simexec;
pub mod sparse_kv;

pub use config::{ConfigError, HardwareProfile, ServeConfig};
pub use request::{DenoiseSchedule, Phase, Request, StepError};
pub use scheduler::{LogitMode, SchedMode, SchedulerState, StepBatch};
pub use simexec::{run_sim, CostModel, SimOptions, SimResult};
