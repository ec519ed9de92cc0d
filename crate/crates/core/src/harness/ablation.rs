//! Feature-ablation orchestration: reruns one trace while enabling the
//! engine's mechanisms one at a time and reports throughput relative to the
//! fully static baseline.

use super::trace::TraceRecord;
use crate::config::ServeConfig;
use crate::scheduler::{LogitMode, SchedMode};
use crate::simexec::{run_sim, CostModel, EventKind, SimError, SimOptions, SimResult};

/// One feature combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationArm {
    pub name: &'static str,
    pub mode: SchedMode,
    pub logit_mode: LogitMode,
    /// Retention ratio for this arm; 1.0 keeps the cache dense.
    pub retention_ratio: f64,
}

/// The standard ladder: static scheduling with monolithic logits and a dense
/// cache, then phase multiplexing, then bounded logit chunks, then per-head
/// sparsity at the configured retention.
pub fn standard_arms(cfg: &ServeConfig) -> [AblationArm; 4] {
    [
        AblationArm {
            name: "baseline-static-dense",
            mode: SchedMode::RequestLevelStatic,
            logit_mode: LogitMode::AllQueryTokens,
            retention_ratio: 1.0,
        },
        AblationArm {
            name: "+phase-multiplexing",
            mode: SchedMode::PhaseMultiplexed,
            logit_mode: LogitMode::AllQueryTokens,
            retention_ratio: 1.0,
        },
        AblationArm {
            name: "+logit-decomposition",
            mode: SchedMode::PhaseMultiplexed,
            logit_mode: LogitMode::ActiveBlock,
            retention_ratio: 1.0,
        },
        AblationArm {
            name: "+head-sparsity",
            mode: SchedMode::PhaseMultiplexed,
            logit_mode: LogitMode::ActiveBlock,
            retention_ratio: cfg.retention_ratio,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub name: &'static str,
    pub throughput: f64,
    pub relative_throughput: f64,
    pub latency_mean: f64,
    pub latency_std: f64,
    pub tail_span: f64,
    pub total_reuse_bytes: u64,
    pub kv_token_slots: u64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub arms: Vec<ArmOutcome>,
}

pub fn total_reuse_bytes(result: &SimResult) -> u64 {
    result
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Step)
        .map(|e| e.reuse_bytes)
        .sum()
}

/// Runs every arm on the same trace. Deterministic.
pub fn run_ablation(
    trace: &[TraceRecord],
    cfg: &ServeConfig,
    cm: &CostModel,
) -> Result<AblationReport, SimError> {
    let mut arms = Vec::new();
    let mut baseline_throughput = None;
    for arm in standard_arms(cfg) {
        let arm_cfg = ServeConfig {
            retention_ratio: arm.retention_ratio,
            ..cfg.clone()
        };
        let opts = SimOptions {
            mode: arm.mode,
            logit_mode: arm.logit_mode,
            seed: 0,
        };
        let result = run_sim(trace, &arm_cfg, cm, opts)?;
        let metrics = result.metrics.as_ref();
        let throughput = metrics.map_or(0.0, |m| m.throughput);
        let baseline = *baseline_throughput.get_or_insert(throughput);
        arms.push(ArmOutcome {
            name: arm.name,
            throughput,
            relative_throughput: if baseline > 0.0 {
                throughput / baseline
            } else {
                0.0
            },
            latency_mean: metrics.map_or(0.0, |m| m.latency_mean),
            latency_std: metrics.map_or(0.0, |m| m.latency_std),
            tail_span: metrics.map_or(0.0, |m| m.tail_span),
            total_reuse_bytes: total_reuse_bytes(&result),
            kv_token_slots: result.plan.kv_token_slots,
        });
    }
    Ok(AblationReport { arms })
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from(
        "arm,throughput_tok_per_s,relative_throughput,latency_mean_s,latency_std_s,tail_span_s,reuse_bytes,kv_token_slots\n",
    );
    for a in &report.arms {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.name,
            a.throughput,
            a.relative_throughput,
            a.latency_mean,
            a.latency_std,
            a.tail_span,
            a.total_reuse_bytes,
            a.kv_token_slots
        ));
    }
    out
}
