//! Synthetic workload generation: Poisson arrivals and alternating
//! base/burst segments. Deterministic per seed.

use super::trace::TraceRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Request length distribution: prompts uniform in
/// `[mean - spread, mean + spread]`, generation length fixed (rounded to a
/// whole number of blocks, at least one).
#[derive(Debug, Clone, Copy)]
pub struct LengthSpec {
    pub prompt_mean: u32,
    pub prompt_spread: u32,
    pub gen_length: u32,
    pub block_size: u32,
}

impl LengthSpec {
    fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> u32 {
        if self.prompt_spread == 0 {
            return self.prompt_mean;
        }
        let lo = self.prompt_mean.saturating_sub(self.prompt_spread);
        let hi = self.prompt_mean + self.prompt_spread;
        rng.random_range(lo..=hi)
    }

    fn rounded_gen(&self) -> u32 {
        let bs = self.block_size;
        let rounded = (self.gen_length + bs / 2) / bs * bs;
        rounded.max(bs)
    }
}

fn exp_gap(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    // Inverse-CDF exponential sample; 1 - u stays in (0, 1].
    let u: f64 = rng.random();
    -((1.0 - u).ln()) / rate
}

/// Poisson arrival trace at the given rate (requests/second).
pub fn gen_poisson(rate: f64, n: usize, lengths: &LengthSpec, seed: u64) -> Vec<TraceRecord> {
    assert!(rate > 0.0, "rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        t += exp_gap(&mut rng, rate);
        out.push(TraceRecord {
            arrival_time: t,
            prompt_len: lengths.sample_prompt(&mut rng),
            gen_length: lengths.rounded_gen(),
        });
    }
    out
}

/// Alternating Poisson segments: `burst_every` seconds at `base_rate`, then
/// `burst_len` seconds at `burst_rate`, repeating until `n` arrivals exist.
pub fn gen_burst(
    base_rate: f64,
    burst_rate: f64,
    burst_every: f64,
    burst_len: f64,
    n: usize,
    lengths: &LengthSpec,
    seed: u64,
) -> Vec<TraceRecord> {
    assert!(
        base_rate > 0.0 && burst_rate > 0.0,
        "rates must be positive"
    );
    assert!(
        burst_every > 0.0 && burst_len > 0.0,
        "segment lengths must be positive"
    );
    let cycle = burst_every + burst_len;
    let rate_at = |t: f64| {
        if t % cycle < burst_every {
            base_rate
        } else {
            burst_rate
        }
    };
    let next_boundary = |t: f64| {
        let in_cycle = t % cycle;
        let cycle_start = t - in_cycle;
        if in_cycle < burst_every {
            cycle_start + burst_every
        } else {
            cycle_start + cycle
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let rate = rate_at(t);
        let candidate = t + exp_gap(&mut rng, rate);
        let boundary = next_boundary(t);
        if candidate > boundary {
            // Rate changes at the boundary; restart the (memoryless) gap
            // from there under the new rate.
            t = boundary;
            continue;
        }
        t = candidate;
        out.push(TraceRecord {
            arrival_time: t,
            prompt_len: lengths.sample_prompt(&mut rng),
            gen_length: lengths.rounded_gen(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::trace::write_trace;

    fn lengths() -> LengthSpec {
        LengthSpec {
            prompt_mean: 100,
            prompt_spread: 20,
            gen_length: 256,
            block_size: 32,
        }
    }

    #[test]
    fn poisson_mean_gap_tracks_rate() {
        let trace = gen_poisson(0.5, 1000, &lengths(), 7);
        let mut prev = 0.0;
        let mut total = 0.0;
        for r in &trace {
            total += r.arrival_time - prev;
            prev = r.arrival_time;
        }
        let mean_gap = total / trace.len() as f64;
        assert!(
            (1.8..=2.2).contains(&mean_gap),
            "mean gap {mean_gap} out of range"
        );
    }

    #[test]
    fn single_arrival_trace() {
        let trace = gen_poisson(2.0, 1, &lengths(), 3);
        assert_eq!(trace.len(), 1);
        assert!(trace[0].arrival_time > 0.0);
    }

    #[test]
    fn same_seed_same_bytes_different_seed_different_trace() {
        let a = gen_poisson(1.0, 50, &lengths(), 11);
        let b = gen_poisson(1.0, 50, &lengths(), 11);
        let c = gen_poisson(1.0, 50, &lengths(), 12);
        assert_eq!(write_trace(&a), write_trace(&b));
        assert_ne!(write_trace(&a), write_trace(&c));
    }

    #[test]
    fn gen_lengths_round_to_whole_blocks() {
        let spec = LengthSpec {
            prompt_mean: 10,
            prompt_spread: 0,
            gen_length: 250,
            block_size: 32,
        };
        let trace = gen_poisson(1.0, 5, &spec, 1);
        assert!(trace.iter().all(|r| r.gen_length == 256));
        let tiny = LengthSpec {
            gen_length: 3,
            ..spec
        };
        assert_eq!(gen_poisson(1.0, 1, &tiny, 1)[0].gen_length, 32);
    }

    #[test]
    fn burst_segments_carry_proportionally_more_arrivals() {
        let (base, burst) = (1.0, 8.0);
        let (every, blen) = (10.0, 5.0);
        let trace = gen_burst(base, burst, every, blen, 10_000, &lengths(), 5);
        let cycle = every + blen;
        let mut base_count = 0u64;
        let mut burst_count = 0u64;
        for r in &trace {
            if r.arrival_time % cycle < every {
                base_count += 1;
            } else {
                burst_count += 1;
            }
        }
        let base_density = base_count as f64 / every;
        let burst_density = burst_count as f64 / blen;
        let ratio = burst_density / base_density;
        let want = burst / base;
        assert!(
            (ratio - want).abs() / want < 0.2,
            "density ratio {ratio} vs {want}"
        );
    }

    #[test]
    fn degenerate_burst_looks_like_poisson() {
        let trace = gen_burst(2.0, 2.0, 5.0, 5.0, 2000, &lengths(), 9);
        assert_eq!(trace.len(), 2000);
        let mean_gap = trace.last().unwrap().arrival_time / 2000.0;
        assert!((0.45..=0.55).contains(&mean_gap), "mean gap {mean_gap}");
    }

    #[test]
    fn empty_burst_trace() {
        assert!(gen_burst(1.0, 2.0, 1.0, 1.0, 0, &lengths(), 1).is_empty());
    }

    #[test]
    fn arrivals_are_sorted() {
        let trace = gen_burst(1.0, 10.0, 3.0, 1.0, 500, &lengths(), 2);
        assert!(trace
            .windows(2)
            .all(|w| w[0].arrival_time <= w[1].arrival_time));
    }
}
