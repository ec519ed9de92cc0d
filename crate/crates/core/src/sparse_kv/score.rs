//! Context-token importance scoring and top-k index selection.

use super::KernelError;
use ndarray::{Array1, Array2, Array3};

fn check_inputs(
    q_block: &Array3<f64>,
    keys: &Array3<f64>,
    window: usize,
) -> Result<(usize, usize, usize, usize), KernelError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(KernelError::BadWindow(window));
    }
    let (n_q, h_q, d_q) = q_block.dim();
    let (n_k, h_k, d_k) = keys.dim();
    if h_q != h_k || d_q != d_k {
        return Err(KernelError::ShapeMismatch(format!(
            "queries {:?} vs keys {:?}",
            q_block.dim(),
            keys.dim()
        )));
    }
    if n_q == 0 || n_k == 0 {
        return Err(KernelError::ShapeMismatch(
            "empty query or key tensor".into(),
        ));
    }
    Ok((n_q, n_k, h_q, d_q))
}

/// Reduction across the block's query rows: the raw score of a context key
/// under one head is the best alignment with any query in the block. The
/// reduction lives here so a sum (or mean) variant stays a one-line swap.
fn reduce_block_queries(
    q_block: &Array3<f64>,
    keys: &Array3<f64>,
    head: usize,
    key_index: usize,
) -> f64 {
    let (n_q, _, head_dim) = q_block.dim();
    let mut best = f64::NEG_INFINITY;
    for qi in 0..n_q {
        let mut dot = 0.0;
        for d in 0..head_dim {
            dot += q_block[[qi, head, d]] * keys[[key_index, head, d]];
        }
        if dot > best {
            best = dot;
        }
    }
    best
}

/// Per-head pooled importance scores, shape `[heads, n_k]`.
///
/// The raw score of context position m under head h is the block-query
/// reduction above; local max-pooling with the given window then spreads
/// credit to neighbors, clipped at sequence edges.
pub fn score_per_head(
    q_block: &Array3<f64>,
    keys: &Array3<f64>,
    window: usize,
) -> Result<Array2<f64>, KernelError> {
    let (_, n_k, num_heads, _) = check_inputs(q_block, keys, window)?;
    let half = window / 2;
    let mut pooled = Array2::zeros((num_heads, n_k));
    for h in 0..num_heads {
        let mut raw = vec![0.0f64; n_k];
        for (m, slot) in raw.iter_mut().enumerate() {
            *slot = reduce_block_queries(q_block, keys, h, m);
        }
        for j in 0..n_k {
            let lo = j.saturating_sub(half);
            let hi = (j + half).min(n_k - 1);
            let mut best = f64::NEG_INFINITY;
            for &r in &raw[lo..=hi] {
                if r > best {
                    best = r;
                }
            }
            pooled[[h, j]] = best;
        }
    }
    Ok(pooled)
}

/// Sequence-level importance scores: per-head pooled scores summed across
/// heads, shape `[n_k]`. Baseline selection mode shared by every head.
pub fn score_global(
    q_block: &Array3<f64>,
    keys: &Array3<f64>,
    window: usize,
) -> Result<Array1<f64>, KernelError> {
    let per_head = score_per_head(q_block, keys, window)?;
    let (num_heads, n_k) = per_head.dim();
    let mut summed = Array1::zeros(n_k);
    for j in 0..n_k {
        let mut total = 0.0;
        for h in 0..num_heads {
            total += per_head[[h, j]];
        }
        summed[j] = total;
    }
    Ok(summed)
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// returned in ascending index order.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>, KernelError> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(KernelError::BadTopK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-head top-k over a `[heads, n_k]` score matrix.
pub fn select_topk_per_head(
    scores: &Array2<f64>,
    k: usize,
) -> Result<Vec<Vec<usize>>, KernelError> {
    let (num_heads, _) = scores.dim();
    (0..num_heads)
        .map(|h| select_topk(&scores.row(h).to_vec(), k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle over all (head, position, window member) triples,
    /// written without the raw/pooled split used by the implementation.
    fn oracle_per_head(q: &Array3<f64>, k: &Array3<f64>, w: usize) -> Array2<f64> {
        let (n_q, num_heads, head_dim) = q.dim();
        let n_k = k.dim().0;
        let half = w / 2;
        let mut out = Array2::zeros((num_heads, n_k));
        for h in 0..num_heads {
            for j in 0..n_k {
                let mut best = f64::NEG_INFINITY;
                for m in 0..n_k {
                    let within = m + half >= j && m <= j + half;
                    if !within {
                        continue;
                    }
                    for qi in 0..n_q {
                        let mut dot = 0.0;
                        for d in 0..head_dim {
                            dot += q[[qi, h, d]] * k[[m, h, d]];
                        }
                        if dot > best {
                            best = dot;
                        }
                    }
                }
                out[[h, j]] = best;
            }
        }
        out
    }

    fn tensor_from(rows: &[Vec<f64>]) -> Array3<f64> {
        // One head; each row is a [dim] vector.
        let n = rows.len();
        let d = rows[0].len();
        Array3::from_shape_fn((n, 1, d), |(i, _, j)| rows[i][j])
    }

    #[test]
    fn worked_single_head_example() {
        let q = tensor_from(&[vec![1.0, 0.0]]);
        let k = tensor_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]);
        let s = score_per_head(&q, &k, 3).unwrap();
        assert_eq!(s.row(0).to_vec(), vec![1.0, 2.0, 2.0]);
        // raw scores are [1, 0, 2]; the window of 3 spreads the 2.
        let oracle = oracle_per_head(&q, &k, 3);
        assert_eq!(s, oracle);
    }

    #[test]
    fn unit_window_is_identity_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Array3::from_shape_fn((3, 2, 4), |_| rng.random_range(-1.0..1.0));
        let k = Array3::from_shape_fn((7, 2, 4), |_| rng.random_range(-1.0..1.0));
        let s1 = score_per_head(&q, &k, 1).unwrap();
        let oracle = oracle_per_head(&q, &k, 1);
        assert_eq!(s1, oracle);
    }

    #[test]
    fn single_key_has_no_neighbors() {
        let q = tensor_from(&[vec![2.0], vec![-1.0]]);
        let k = tensor_from(&[vec![3.0]]);
        let s = score_per_head(&q, &k, 5).unwrap();
        assert_eq!(s[[0, 0]], 6.0);
    }

    #[test]
    fn randomized_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n_q = rng.random_range(1..6usize);
            let n_k = rng.random_range(1..24usize);
            let h = rng.random_range(1..4usize);
            let d = rng.random_range(1..6usize);
            let w = [1usize, 3, 5, 7][rng.random_range(0..4usize)];
            let q = Array3::from_shape_fn((n_q, h, d), |_| rng.random_range(-2.0..2.0));
            let k = Array3::from_shape_fn((n_k, h, d), |_| rng.random_range(-2.0..2.0));
            let got = score_per_head(&q, &k, w).unwrap();
            let want = oracle_per_head(&q, &k, w);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn global_degenerates_to_single_head() {
        let q = tensor_from(&[vec![1.0, 0.5]]);
        let k = tensor_from(&[vec![0.2, 0.1], vec![-1.0, 3.0]]);
        let per_head = score_per_head(&q, &k, 3).unwrap();
        let global = score_global(&q, &k, 3).unwrap();
        assert_eq!(global.to_vec(), per_head.row(0).to_vec());
    }

    #[test]
    fn global_sums_across_heads_flattens_specialists() {
        // Two heads whose pooled scores are [1,2] and [2,1]; the shared score
        // is flat [3,3] and can no longer separate them.
        let mut q = Array3::zeros((1, 2, 1));
        q[[0, 0, 0]] = 1.0;
        q[[0, 1, 0]] = 1.0;
        let mut k = Array3::zeros((2, 2, 1));
        k[[0, 0, 0]] = 1.0;
        k[[1, 0, 0]] = 2.0;
        k[[0, 1, 0]] = 2.0;
        k[[1, 1, 0]] = 1.0;
        let per_head = score_per_head(&q, &k, 1).unwrap();
        assert_eq!(per_head.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(per_head.row(1).to_vec(), vec![2.0, 1.0]);
        let global = score_global(&q, &k, 1).unwrap();
        assert_eq!(global.to_vec(), vec![3.0, 3.0]);
        // Summation oracle.
        let summed = per_head.sum_axis(Axis(0));
        assert_eq!(global, summed);
    }

    #[test]
    fn all_zero_queries_give_zero_scores() {
        let q = Array3::zeros((2, 3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = Array3::from_shape_fn((5, 3, 4), |_| rng.random_range(-1.0..1.0));
        let s = score_global(&q, &k, 3).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn topk_prefers_higher_scores_with_low_index_ties() {
        assert_eq!(select_topk(&[1.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_topk(&[9.0, 9.0], 1).unwrap(), vec![0]);
        assert_eq!(select_topk(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn topk_full_retention_returns_all_ascending() {
        let s = [0.3, -1.0, 7.0, 0.0];
        assert_eq!(select_topk(&s, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        assert_eq!(
            select_topk(&[1.0], 2),
            Err(KernelError::BadTopK { k: 2, n: 1 })
        );
        assert_eq!(
            select_topk(&[1.0], 0),
            Err(KernelError::BadTopK { k: 0, n: 1 })
        );
    }

    #[test]
    fn topk_matches_exhaustive_ranking_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..20usize);
            let k = rng.random_range(1..=n);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = select_topk(&scores, k).unwrap();
            // Oracle: any excluded index must not beat any included one under
            // (score, -index) ordering.
            for &inside in &got {
                for outside in (0..n).filter(|i| !got.contains(i)) {
                    let beats = scores[outside] > scores[inside]
                        || (scores[outside] == scores[inside] && outside < inside);
                    assert!(!beats, "index {outside} should have displaced {inside}");
                }
            }
            assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn per_head_and_shared_selection_diverge_on_specialist_heads() {
        // Head 0 scores [9,0], head 1 scores [0,9]. Per-head keeps each
        // head's top token; the shared sum [9,9] keeps only index 0 and
        // drops head 1's best key.
        let mut q = Array3::zeros((1, 2, 1));
        q[[0, 0, 0]] = 3.0;
        q[[0, 1, 0]] = 3.0;
        let mut k = Array3::zeros((2, 2, 1));
        k[[0, 0, 0]] = 3.0;
        k[[1, 1, 0]] = 3.0;
        let per_head = score_per_head(&q, &k, 1).unwrap();
        let chosen = select_topk_per_head(&per_head, 1).unwrap();
        assert_eq!(chosen, vec![vec![0], vec![1]]);
        let global = score_global(&q, &k, 1).unwrap();
        let shared = select_topk(&global.to_vec(), 1).unwrap();
        assert_eq!(shared, vec![0]);
        assert!(!shared.contains(&1), "head 1 lost its top token");
    }
}
