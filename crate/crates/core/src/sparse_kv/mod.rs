//! Head-centric sparse KV cache: importance scoring, top-k selection,
//! dense per-head packing, pool accounting, and reference attention kernels.
//!
//! Tensors use the layout `[tokens, heads, head_dim]` in f64. Kernels sum in
//! ascending index order so oracle comparisons are bit-reproducible. Keys are
//! taken as given: any positional encoding is assumed already applied before
//! packing, and the reference path applies none of its own.

mod attention;
mod pool;
mod score;

pub use attention::{attention_dense, attention_with_cache};
pub use pool::{KvHandle, KvPool, PoolError};
pub use score::{score_global, score_per_head, select_topk, select_topk_per_head};

use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("tensor shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("pooling window must be odd and >= 1, got {0}")]
    BadWindow(usize),
    #[error("top-k count {k} out of range for {n} candidates")]
    BadTopK { k: usize, n: usize },
    #[error("head {head}: index list must be strictly ascending, in range, and {expected} long")]
    BadIndexList { head: usize, expected: usize },
}

/// Query/key/value tensors of shape `[tokens, heads, head_dim]`.
#[derive(Debug, Clone)]
pub struct AttnTensors {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
}

impl AttnTensors {
    pub fn new(q: Array3<f64>, k: Array3<f64>, v: Array3<f64>) -> Result<Self, KernelError> {
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
        Ok(Self { q, k, v })
    }
}

/// Per-request, per-head contiguous retained KV store of shape
/// `[heads, retained, head_dim]`.
///
/// Rows sit in selection-index order; the index map used to build the store
/// is transient and not retained here.
#[derive(Debug, Clone)]
pub struct PackedKv {
    pub keys: Array3<f64>,
    pub values: Array3<f64>,
    pub handle: Option<KvHandle>,
}

impl PackedKv {
    /// A cache with zero retained tokens.
    pub fn empty(num_heads: usize, head_dim: usize) -> Self {
        Self {
            keys: Array3::zeros((num_heads, 0, head_dim)),
            values: Array3::zeros((num_heads, 0, head_dim)),
            handle: None,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.keys.dim().0
    }

    pub fn retained(&self) -> usize {
        self.keys.dim().1
    }

    pub fn head_dim(&self) -> usize {
        self.keys.dim().2
    }
}

/// Gathers each head's selected rows into a physically dense per-head store.
///
/// Every index list must be strictly ascending (which also rules out
/// duplicates), in range, and of equal length across heads. Source tensors
/// are left untouched; rows are copied bit-identically, no arithmetic.
pub fn pack_kv(
    keys: &Array3<f64>,
    values: &Array3<f64>,
    indices_per_head: &[Vec<usize>],
) -> Result<PackedKv, KernelError> {
    let (n_k, num_heads, head_dim) = keys.dim();
    if values.dim() != keys.dim() {
        return Err(KernelError::ShapeMismatch(format!(
            "keys {:?} vs values {:?}",
            keys.dim(),
            values.dim()
        )));
    }
    if indices_per_head.len() != num_heads {
        return Err(KernelError::ShapeMismatch(format!(
            "{} index lists for {} heads",
            indices_per_head.len(),
            num_heads
        )));
    }
    let retained = indices_per_head.first().map_or(0, Vec::len);
    for (head, list) in indices_per_head.iter().enumerate() {
        let ascending_in_range =
            list.windows(2).all(|w| w[0] < w[1]) && list.last().is_none_or(|&last| last < n_k);
        if list.len() != retained || !ascending_in_range {
            return Err(KernelError::BadIndexList {
                head,
                expected: retained,
            });
        }
    }
    let mut packed_k = Array3::zeros((num_heads, retained, head_dim));
    let mut packed_v = Array3::zeros((num_heads, retained, head_dim));
    for (head, list) in indices_per_head.iter().enumerate() {
        for (row, &src) in list.iter().enumerate() {
            for d in 0..head_dim {
                packed_k[[head, row, d]] = keys[[src, head, d]];
                packed_v[[head, row, d]] = values[[src, head, d]];
            }
        }
    }
    Ok(PackedKv {
        keys: packed_k,
        values: packed_v,
        handle: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, h, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_pack_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_tensor(&mut rng, 5, 2, 3);
        let v = random_tensor(&mut rng, 5, 2, 3);
        let all: Vec<Vec<usize>> = vec![(0..5).collect(), (0..5).collect()];
        let packed = pack_kv(&k, &v, &all).unwrap();
        for h in 0..2 {
            for j in 0..5 {
                for d in 0..3 {
                    assert_eq!(packed.keys[[h, j, d]], k[[j, h, d]]);
                    assert_eq!(packed.values[[h, j, d]], v[[j, h, d]]);
                }
            }
        }
    }

    #[test]
    fn disjoint_head_sets_pack_different_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_tensor(&mut rng, 4, 2, 2);
        let v = random_tensor(&mut rng, 4, 2, 2);
        let idx = vec![vec![0, 1], vec![2, 3]];
        let packed = pack_kv(&k, &v, &idx).unwrap();
        // Gather oracle: row j of head h equals source row idx[h][j].
        for (h, list) in idx.iter().enumerate() {
            for (j, &src) in list.iter().enumerate() {
                for d in 0..2 {
                    assert_eq!(packed.keys[[h, j, d]], k[[src, h, d]]);
                }
            }
        }
        assert_ne!(packed.keys[[0, 0, 0]], packed.keys[[1, 0, 0]]);
    }

    #[test]
    fn single_row_pack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_tensor(&mut rng, 6, 3, 2);
        let v = random_tensor(&mut rng, 6, 3, 2);
        let idx = vec![vec![4], vec![0], vec![5]];
        let packed = pack_kv(&k, &v, &idx).unwrap();
        assert_eq!(packed.retained(), 1);
        for (h, list) in idx.iter().enumerate() {
            for d in 0..2 {
                assert_eq!(packed.keys[[h, 0, d]], k[[list[0], h, d]]);
            }
        }
    }

    #[test]
    fn pack_rejects_duplicates_and_out_of_range() {
        let k = Array3::<f64>::zeros((3, 1, 2));
        let v = Array3::<f64>::zeros((3, 1, 2));
        assert!(matches!(
            pack_kv(&k, &v, &[vec![1, 1]]),
            Err(KernelError::BadIndexList { head: 0, .. })
        ));
        assert!(matches!(
            pack_kv(&k, &v, &[vec![2, 3]]),
            Err(KernelError::BadIndexList { head: 0, .. })
        ));
        assert!(matches!(
            pack_kv(&k, &v, &[vec![2, 0]]),
            Err(KernelError::BadIndexList { head: 0, .. })
        ));
    }

    #[test]
    fn pack_rejects_uneven_lists() {
        let k = Array3::<f64>::zeros((3, 2, 2));
        let v = Array3::<f64>::zeros((3, 2, 2));
        assert!(matches!(
            pack_kv(&k, &v, &[vec![0, 1], vec![2]]),
            Err(KernelError::BadIndexList { head: 1, .. })
        ));
    }

    #[test]
    fn attn_tensors_validation() {
        let q = Array3::<f64>::zeros((2, 2, 3));
        let k = Array3::<f64>::zeros((4, 2, 3));
        let v = Array3::<f64>::zeros((4, 2, 3));
        AttnTensors::new(q.clone(), k.clone(), v.clone()).unwrap();
        let bad_v = Array3::<f64>::zeros((4, 2, 2));
        assert!(AttnTensors::new(q, k, bad_v).is_err());
    }
}
