//! Reference softmax-attention kernels.
//!
//! Per head: `O = rowsoftmax(Q K^T / sqrt(d)) V`, with max-subtraction for
//! stability. Summations run in ascending key order; no blocking, no fusion.

use super::{KernelError, PackedKv};
use ndarray::Array3;

fn softmax_in_place(logits: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &l in logits.iter() {
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Full attention over one contiguous key/value set.
pub fn attention_dense(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    scale_dim: usize,
) -> Result<Array3<f64>, KernelError> {
    let (n_q, h_q, d_q) = q.dim();
    let (n_k, h_k, d_k) = k.dim();
    if v.dim() != k.dim() || h_q != h_k || d_q != d_k {
        return Err(KernelError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if n_q == 0 || n_k == 0 {
        return Err(KernelError::ShapeMismatch(
            "empty query or key tensor".into(),
        ));
    }
    let scale = (scale_dim as f64).sqrt();
    let mut out = Array3::zeros((n_q, h_q, d_q));
    let mut logits = vec![0.0f64; n_k];
    for h in 0..h_q {
        for qi in 0..n_q {
            for (m, slot) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..d_q {
                    dot += q[[qi, h, d]] * k[[m, h, d]];
                }
                *slot = dot / scale;
            }
            softmax_in_place(&mut logits);
            for (m, &w) in logits.iter().enumerate() {
                for d in 0..d_q {
                    out[[qi, h, d]] += w * v[[m, h, d]];
                }
            }
        }
    }
    Ok(out)
}

/// Block attention against block KV concatenated with the packed cache:
/// keys are `[K_block; cache]` per head, values likewise.
///
/// The cache is read row by row in stored order; there is no index
/// indirection. An empty cache reduces to dense attention over the block.
pub fn attention_with_cache(
    q_block: &Array3<f64>,
    k_block: &Array3<f64>,
    v_block: &Array3<f64>,
    cache: &PackedKv,
    scale_dim: usize,
) -> Result<Array3<f64>, KernelError> {
    let (n_q, h_q, d_q) = q_block.dim();
    let (n_b, h_b, d_b) = k_block.dim();
    if v_block.dim() != k_block.dim() || h_q != h_b || d_q != d_b {
        return Err(KernelError::ShapeMismatch(format!(
            "q {:?}, k_block {:?}, v_block {:?}",
            q_block.dim(),
            k_block.dim(),
            v_block.dim()
        )));
    }
    if cache.num_heads() != h_q || cache.head_dim() != d_q {
        return Err(KernelError::ShapeMismatch(format!(
            "cache [{}, {}, {}] vs block heads {} dim {}",
            cache.num_heads(),
            cache.retained(),
            cache.head_dim(),
            h_q,
            d_q
        )));
    }
    if n_q == 0 || n_b == 0 {
        return Err(KernelError::ShapeMismatch(
            "empty query or block tensor".into(),
        ));
    }
    let retained = cache.retained();
    let total_keys = n_b + retained;
    let scale = (scale_dim as f64).sqrt();
    let mut out = Array3::zeros((n_q, h_q, d_q));
    let mut logits = vec![0.0f64; total_keys];
    for h in 0..h_q {
        for qi in 0..n_q {
            for m in 0..n_b {
                let mut dot = 0.0;
                for d in 0..d_q {
                    dot += q_block[[qi, h, d]] * k_block[[m, h, d]];
                }
                logits[m] = dot / scale;
            }
            for j in 0..retained {
                let mut dot = 0.0;
                for d in 0..d_q {
                    dot += q_block[[qi, h, d]] * cache.keys[[h, j, d]];
                }
                logits[n_b + j] = dot / scale;
            }
            softmax_in_place(&mut logits);
            for (m, &w) in logits.iter().take(n_b).enumerate() {
                for d in 0..d_q {
                    out[[qi, h, d]] += w * v_block[[m, h, d]];
                }
            }
            for j in 0..retained {
                let w = logits[n_b + j];
                for d in 0..d_q {
                    out[[qi, h, d]] += w * cache.values[[h, j, d]];
                }
            }
        }
    }
    Ok(out)
}
