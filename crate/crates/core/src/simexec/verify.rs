//! Numeric verification mode: drives real (tiny) tensors through scoring,
//! packing, and the cache-backed attention kernel over a full multi-block
//! denoising loop, and checks the results against independent references.

use crate::membudget::{chunked_decode, plan_logit_chunks};
use crate::sparse_kv::{
    attention_dense, attention_with_cache, pack_kv, score_global, score_per_head, select_topk,
    select_topk_per_head, AttnTensors, KernelError, PackedKv,
};
use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tensor dimensions for the verification loop. Intentionally tiny: the
/// point is exactness, not scale.
#[derive(Debug, Clone)]
pub struct VerifyDims {
    pub num_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub block_size: usize,
    pub num_blocks: usize,
    pub steps_per_block: usize,
    pub refresh_interval: Option<usize>,
    pub retention_ratio: f64,
    pub pool_window: usize,
    /// Chunk cap for the decode-equivalence probe.
    pub logit_chunk_cap: u64,
}

impl Default for VerifyDims {
    fn default() -> Self {
        Self {
            num_heads: 3,
            head_dim: 6,
            prompt_len: 12,
            block_size: 8,
            num_blocks: 3,
            steps_per_block: 4,
            refresh_interval: Some(2),
            retention_ratio: 0.5,
            pool_window: 3,
            logit_chunk_cap: 5,
        }
    }
}

/// Aggregated deviations and witness outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seeds_run: u64,
    /// Per-head top-k mode vs the masked-dense reference.
    pub max_per_head_dev: f64,
    /// Full-retention mode vs dense attention over block + context.
    pub max_dense_dev: f64,
    /// Shared-mask mode vs its masked-dense reference.
    pub max_shared_dev: f64,
    /// Chunked decode disagreements with monolithic argmax.
    pub decode_mismatches: u64,
    /// Per-head selection retained every head's top-scoring key.
    pub witness_per_head_keeps_top_keys: bool,
    /// The shared mask dropped some head's top-scoring key.
    pub witness_shared_drops_a_top_key: bool,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_per_head_dev <= 1e-10
            && self.max_dense_dev <= 1e-12
            && self.max_shared_dev <= 1e-10
            && self.decode_mismatches == 0
            && self.witness_per_head_keeps_top_keys
            && self.witness_shared_drops_a_top_key
    }

    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("seeds run:                 {}", self.seeds_run),
            format!(
                "per-head vs masked dense:  {:.3e} (bound 1e-10)",
                self.max_per_head_dev
            ),
            format!(
                "full retention vs dense:   {:.3e} (bound 1e-12)",
                self.max_dense_dev
            ),
            format!(
                "shared mask vs masked:     {:.3e} (bound 1e-10)",
                self.max_shared_dev
            ),
            format!("chunked decode mismatches: {}", self.decode_mismatches),
            format!(
                "per-head keeps all top keys: {}; shared mask drops one: {}",
                self.witness_per_head_keeps_top_keys, self.witness_shared_drops_a_top_key
            ),
            format!("verdict: {}", if self.passed() { "PASS" } else { "FAIL" }),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SelectionMode {
    FullRetention,
    PerHead,
    SharedMask,
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> Array3<f64> {
    Array3::from_shape_fn((n, h, d), |_| rng.random_range(-1.0..1.0))
}

fn rel_dev(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Masked-dense reference: per head, plain softmax attention over the block
/// plus only that head's selected context rows. Written as direct nested
/// loops, independent of the packed-cache kernel it checks.
fn masked_reference(
    q: &Array3<f64>,
    k_block: &Array3<f64>,
    v_block: &Array3<f64>,
    ctx_k: &Array3<f64>,
    ctx_v: &Array3<f64>,
    indices: &[Vec<usize>],
    scale_dim: usize,
) -> Array3<f64> {
    let (n_q, num_heads, head_dim) = q.dim();
    let n_b = k_block.dim().0;
    let scale = (scale_dim as f64).sqrt();
    let mut out = Array3::zeros((n_q, num_heads, head_dim));
    for (h, list) in indices.iter().enumerate() {
        for qi in 0..n_q {
            let mut logits = Vec::with_capacity(n_b + list.len());
            for m in 0..n_b {
                let mut dot = 0.0;
                for d in 0..head_dim {
                    dot += q[[qi, h, d]] * k_block[[m, h, d]];
                }
                logits.push(dot / scale);
            }
            for &src in list {
                let mut dot = 0.0;
                for d in 0..head_dim {
                    dot += q[[qi, h, d]] * ctx_k[[src, h, d]];
                }
                logits.push(dot / scale);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for m in 0..n_b {
                for d in 0..head_dim {
                    out[[qi, h, d]] += exps[m] / total * v_block[[m, h, d]];
                }
            }
            for (j, &src) in list.iter().enumerate() {
                for d in 0..head_dim {
                    out[[qi, h, d]] += exps[n_b + j] / total * ctx_v[[src, h, d]];
                }
            }
        }
    }
    out
}

/// Constructed two-head instance on which per-head and shared selection
/// disagree: each head's single strong key sits at a different position, the
/// summed score ties, and the shared mask keeps only the lower index.
///
/// Returns (per-head kept every head's top key, shared mask dropped one).
pub fn selection_divergence_witness() -> Result<(bool, bool), KernelError> {
    let mut q = Array3::zeros((1, 2, 1));
    q[[0, 0, 0]] = 3.0;
    q[[0, 1, 0]] = 3.0;
    let mut k = Array3::zeros((2, 2, 1));
    k[[0, 0, 0]] = 3.0;
    k[[1, 1, 0]] = 3.0;
    let per_head_scores = score_per_head(&q, &k, 1)?;
    let num_heads = per_head_scores.dim().0;
    // Each head's top-scoring key index, from its own score row.
    let top_key_of_head: Vec<usize> = (0..num_heads)
        .map(|h| {
            let row = per_head_scores.row(h);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let per_head_sel = select_topk_per_head(&per_head_scores, 1)?;
    let keeps_all = top_key_of_head
        .iter()
        .enumerate()
        .all(|(h, top)| per_head_sel[h].contains(top));
    let shared_scores = score_global(&q, &k, 1)?;
    let shared = select_topk(&shared_scores.to_vec(), 1)?;
    let drops_one = top_key_of_head.iter().any(|top| !shared.contains(top));
    Ok((keeps_all, drops_one))
}

fn run_mode(
    seed: u64,
    dims: &VerifyDims,
    mode: SelectionMode,
) -> Result<(f64, f64, u64), KernelError> {
    // Same seed across modes: identical tensor streams, selection is the
    // only difference.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, d, block) = (dims.num_heads, dims.head_dim, dims.block_size);
    let total_len = dims.prompt_len + dims.num_blocks * block;
    let mut max_masked_dev = 0.0f64;
    let mut max_dense_dev = 0.0f64;
    let mut decode_mismatches = 0u64;

    let mut ctx_k = Array3::zeros((0, h, d));
    let mut ctx_v = Array3::zeros((0, h, d));
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); h];
    let mut cache = PackedKv::empty(h, d);

    for b in 0..dims.num_blocks {
        let block_start = dims.prompt_len + b * block;
        let n_ctx = block_start;
        for s_in_block in 0..dims.steps_per_block {
            let refresh =
                s_in_block == 0 || dims.refresh_interval.is_some_and(|k| s_in_block % k == 0);
            if refresh {
                // Full-sequence state update: fresh QKV over all positions,
                // then re-score and re-pack the context outside the block.
                let full = AttnTensors::new(
                    random_tensor(&mut rng, total_len, h, d),
                    random_tensor(&mut rng, total_len, h, d),
                    random_tensor(&mut rng, total_len, h, d),
                )?;
                let _full_out = attention_dense(&full.q, &full.k, &full.v, d)?;
                let q_b = full
                    .q
                    .slice(s![block_start..block_start + block, .., ..])
                    .to_owned();
                if n_ctx > 0 {
                    ctx_k = full.k.slice(s![0..n_ctx, .., ..]).to_owned();
                    ctx_v = full.v.slice(s![0..n_ctx, .., ..]).to_owned();
                    let keep = ((dims.retention_ratio * n_ctx as f64).ceil() as usize).max(1);
                    indices = match mode {
                        SelectionMode::FullRetention => {
                            (0..h).map(|_| (0..n_ctx).collect()).collect()
                        }
                        SelectionMode::PerHead => {
                            let scores = score_per_head(&q_b, &ctx_k, dims.pool_window)?;
                            select_topk_per_head(&scores, keep)?
                        }
                        SelectionMode::SharedMask => {
                            let scores = score_global(&q_b, &ctx_k, dims.pool_window)?;
                            let shared = select_topk(&scores.to_vec(), keep)?;
                            vec![shared; h]
                        }
                    };
                    cache = pack_kv(&ctx_k, &ctx_v, &indices)?;
                }
            }
            // Every step computes block attention against the packed cache.
            let q_s = random_tensor(&mut rng, block, h, d);
            let k_s = random_tensor(&mut rng, block, h, d);
            let v_s = random_tensor(&mut rng, block, h, d);
            let got = attention_with_cache(&q_s, &k_s, &v_s, &cache, d)?;
            let want = masked_reference(&q_s, &k_s, &v_s, &ctx_k, &ctx_v, &indices, d);
            max_masked_dev = max_masked_dev.max(rel_dev(&got, &want));
            if mode == SelectionMode::FullRetention && n_ctx > 0 {
                let k_cat = concatenate(Axis(0), &[k_s.view(), ctx_k.view()]).unwrap();
                let v_cat = concatenate(Axis(0), &[v_s.view(), ctx_v.view()]).unwrap();
                let dense = attention_dense(&q_s, &k_cat, &v_cat, d)?;
                max_dense_dev = max_dense_dev.max(rel_dev(&got, &dense));
            }
            // Decode-equivalence probe on this step's outputs.
            let vocab = h * d;
            let logits =
                Array2::from_shape_fn((block, vocab), |(row, col)| got[[row, col / d, col % d]]);
            let plan = plan_logit_chunks(block as u64, dims.logit_chunk_cap);
            let chunked = chunked_decode(&plan, |i| {
                let start: usize = plan[..i].iter().sum::<u64>() as usize;
                let rows = plan[i] as usize;
                logits.slice(s![start..start + rows, ..]).to_owned()
            })
            .expect("probe chunks are well-shaped");
            for (row, &id) in chunked.token_ids.iter().enumerate() {
                let mut best = 0usize;
                for col in 0..vocab {
                    if logits[[row, col]] > logits[[row, best]] {
                        best = col;
                    }
                }
                if best as u32 != id {
                    decode_mismatches += 1;
                }
            }
        }
    }
    Ok((max_masked_dev, max_dense_dev, decode_mismatches))
}

/// Runs the three selection modes for one seed.
pub fn run_numeric_verify(seed: u64, dims: &VerifyDims) -> Result<VerifyReport, KernelError> {
    let (dense_masked, dense_dev, m1) = run_mode(seed, dims, SelectionMode::FullRetention)?;
    let (per_head_dev, _, m2) = run_mode(seed, dims, SelectionMode::PerHead)?;
    let (shared_dev, _, m3) = run_mode(seed, dims, SelectionMode::SharedMask)?;
    let (keeps, drops) = selection_divergence_witness()?;
    Ok(VerifyReport {
        seeds_run: 1,
        max_per_head_dev: per_head_dev.max(dense_masked),
        max_dense_dev: dense_dev,
        max_shared_dev: shared_dev,
        decode_mismatches: m1 + m2 + m3,
        witness_per_head_keeps_top_keys: keeps,
        witness_shared_drops_a_top_key: drops,
    })
}

/// Aggregates [`run_numeric_verify`] over seeds `1..=num_seeds`.
pub fn run_numeric_verify_many(
    num_seeds: u64,
    dims: &VerifyDims,
) -> Result<VerifyReport, KernelError> {
    let mut agg = VerifyReport {
        seeds_run: 0,
        max_per_head_dev: 0.0,
        max_dense_dev: 0.0,
        max_shared_dev: 0.0,
        decode_mismatches: 0,
        witness_per_head_keeps_top_keys: true,
        witness_shared_drops_a_top_key: true,
    };
    for seed in 1..=num_seeds {
        let r = run_numeric_verify(seed, dims)?;
        agg.seeds_run += 1;
        agg.max_per_head_dev = agg.max_per_head_dev.max(r.max_per_head_dev);
        agg.max_dense_dev = agg.max_dense_dev.max(r.max_dense_dev);
        agg.max_shared_dev = agg.max_shared_dev.max(r.max_shared_dev);
        agg.decode_mismatches += r.decode_mismatches;
        agg.witness_per_head_keeps_top_keys &= r.witness_per_head_keeps_top_keys;
        agg.witness_shared_drops_a_top_key &= r.witness_shared_drops_a_top_key;
    }
    Ok(agg)
}
