//! Analytic memory model: logit tensor sizing, logit-chunk planning,
//! peak-activation profiling with a guard band, and KV-pool capacity.
//!
//! All plan arithmetic is exact integer arithmetic with explicit overflow
//! detection; nothing here rounds silently.

use crate::config::ServeConfig;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("byte arithmetic overflow")]
    Overflow,
    #[error("{0} must be at least 1")]
    ZeroInput(&'static str),
    #[error(
        "memory plan infeasible: weights + activation = {required} bytes exceed hbm {hbm} bytes"
    )]
    InsufficientCapacity { required: u64, hbm: u64 },
    #[error(
        "chunk {index}: provider returned {got_rows}x{got_cols}, expected {want_rows}x{want_cols}"
    )]
    ChunkShape {
        index: usize,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
}

/// Derived memory layout for one serving configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPlan {
    pub activation_budget_bytes: u64,
    pub kv_pool_bytes: u64,
    /// Pool capacity in retained-token units.
    pub kv_token_slots: u64,
    /// Chunk decomposition of the worst-case per-step logit demand.
    pub logit_chunk_plan: Vec<u64>,
}

fn checked_product(factors: &[u64]) -> Result<u64, MemError> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(MemError::Overflow)
}

/// Bytes of a monolithic `[batch, seq_len, vocab]` logit tensor.
pub fn logit_tensor_bytes(
    batch: u64,
    seq_len: u64,
    vocab: u64,
    elem_bytes: u64,
) -> Result<u64, MemError> {
    for (name, v) in [
        ("batch", batch),
        ("seq_len", seq_len),
        ("vocab", vocab),
        ("elem_bytes", elem_bytes),
    ] {
        if v == 0 {
            return Err(MemError::ZeroInput(name));
        }
    }
    checked_product(&[batch, seq_len, vocab, elem_bytes])
}

/// Splits `n_logit` tokens into greedy full chunks of `max_num_logits`
/// followed by one remainder chunk.
pub fn plan_logit_chunks(n_logit: u64, max_num_logits: u64) -> Vec<u64> {
    let full = n_logit / max_num_logits;
    let rem = n_logit % max_num_logits;
    let mut plan = vec![max_num_logits; full as usize];
    if rem > 0 {
        plan.push(rem);
    }
    plan
}

/// Outcome of a chunked decode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedDecode {
    /// Argmax token id per row, concatenated in plan order. Ties break
    /// toward the lower index.
    pub token_ids: Vec<u32>,
    /// High-water mark of simultaneously resident logit rows.
    pub peak_resident_rows: u64,
}

/// Runs the decode operator chunk by chunk, holding at most one chunk of
/// logits at a time. `logits_for_chunk(i)` must yield a `[plan[i], vocab]`
/// matrix.
pub fn chunked_decode<F>(plan: &[u64], mut logits_for_chunk: F) -> Result<ChunkedDecode, MemError>
where
    F: FnMut(usize) -> Array2<f64>,
{
    let mut token_ids = Vec::new();
    let mut peak = 0u64;
    let mut vocab: Option<usize> = None;
    for (index, &rows) in plan.iter().enumerate() {
        let chunk = logits_for_chunk(index);
        let want_cols = vocab.unwrap_or(chunk.ncols());
        if chunk.nrows() as u64 != rows || chunk.ncols() != want_cols || chunk.ncols() == 0 {
            return Err(MemError::ChunkShape {
                index,
                got_rows: chunk.nrows(),
                got_cols: chunk.ncols(),
                want_rows: rows as usize,
                want_cols,
            });
        }
        vocab = Some(want_cols);
        peak = peak.max(rows);
        for row in chunk.rows() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            token_ids.push(best as u32);
        }
        // chunk dropped here; the next one is materialized fresh
    }
    Ok(ChunkedDecode {
        token_ids,
        peak_resident_rows: peak,
    })
}

fn workspace_bytes(cfg: &ServeConfig, query_tokens: u64) -> Result<u64, MemError> {
    checked_product(&[
        query_tokens,
        cfg.hidden_dim,
        cfg.bytes_per_element,
        cfg.workspace_scale,
    ])
}

fn apply_guard_band(raw: u64, fraction: f64) -> u64 {
    ((raw as f64) * (1.0 + fraction)).ceil() as u64
}

/// Peak activation bytes under logit-bounded execution: query-token
/// workspace plus one `max_num_logits`-row logit chunk, padded by the guard
/// band.
pub fn profile_peak_activation(cfg: &ServeConfig) -> Result<u64, MemError> {
    let ws = workspace_bytes(cfg, cfg.max_num_batched_tokens)?;
    let logits = logit_tensor_bytes(1, cfg.max_num_logits, cfg.vocab_size, cfg.bytes_per_element)?;
    let raw = ws.checked_add(logits).ok_or(MemError::Overflow)?;
    Ok(apply_guard_band(raw, cfg.hw.guard_band_fraction))
}

/// Peak activation bytes when the output projection is materialized
/// monolithically for a `[batch, seq_len, vocab]` tensor.
pub fn profile_peak_activation_monolithic(
    cfg: &ServeConfig,
    batch: u64,
    seq_len: u64,
) -> Result<u64, MemError> {
    let ws = workspace_bytes(cfg, cfg.max_num_batched_tokens)?;
    let logits = logit_tensor_bytes(batch, seq_len, cfg.vocab_size, cfg.bytes_per_element)?;
    let raw = ws.checked_add(logits).ok_or(MemError::Overflow)?;
    Ok(apply_guard_band(raw, cfg.hw.guard_band_fraction))
}

/// Bytes of one retained token across key + value, all heads, all layers.
pub fn bytes_per_retained_token(cfg: &ServeConfig) -> u64 {
    2 * cfg.num_heads * cfg.head_dim * cfg.bytes_per_element * cfg.num_layers
}

/// Retained tokens for a sequence of `total_len`: ceil(r * L), never 0 for
/// L >= 1.
pub fn retained_tokens(total_len: u64, retention_ratio: f64) -> u64 {
    ((retention_ratio * total_len as f64).ceil() as u64).max(u64::from(total_len >= 1))
}

/// Pool slots one request reserves for its whole lifetime.
pub fn kv_request_slots(total_len: u32, cfg: &ServeConfig) -> u64 {
    retained_tokens(total_len as u64, cfg.retention_ratio)
}

/// Bytes of one request's packed per-head KV block.
pub fn kv_request_footprint(total_len: u32, cfg: &ServeConfig) -> u64 {
    kv_request_slots(total_len, cfg) * bytes_per_retained_token(cfg)
}

/// Splits device memory left over after weights and the activation budget
/// into the KV pool.
pub fn kv_pool_capacity(cfg: &ServeConfig, activation_budget: u64) -> Result<MemoryPlan, MemError> {
    let fixed = cfg
        .hw
        .weights_bytes
        .checked_add(activation_budget)
        .ok_or(MemError::Overflow)?;
    if fixed > cfg.hw.hbm_bytes {
        return Err(MemError::InsufficientCapacity {
            required: fixed,
            hbm: cfg.hw.hbm_bytes,
        });
    }
    let kv_pool_bytes = cfg.hw.hbm_bytes - fixed;
    let kv_token_slots = kv_pool_bytes / bytes_per_retained_token(cfg);
    // Worst-case per-step logit demand: every budget-fitting request decodes
    // one block.
    let worst_logits = (cfg.max_num_batched_tokens / cfg.block_size as u64) * cfg.block_size as u64;
    Ok(MemoryPlan {
        activation_budget_bytes: activation_budget,
        kv_pool_bytes,
        kv_token_slots,
        logit_chunk_plan: plan_logit_chunks(worst_logits, cfg.max_num_logits),
    })
}
