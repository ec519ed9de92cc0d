//! Slot-granular KV pool with all-or-nothing reservations.
//!
//! Capacity is expressed in retained-token slots (see the memory plan).
//! The pool is mutated only by the owning engine loop.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    /// The scheduler treats this as "request stays waiting".
    #[error("pool exhausted: requested {requested} slots, {free} free")]
    Exhausted { requested: u64, free: u64 },
    #[error("request {0} already holds an allocation")]
    AlreadyAllocated(u64),
    #[error("handle for request {0} is not live")]
    StaleHandle(u64),
}

/// Reservation receipt returned by [`KvPool::alloc`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvHandle {
    pub request_id: u64,
    pub slots: u64,
}

#[derive(Debug, Clone)]
pub struct KvPool {
    capacity: u64,
    free: u64,
    live: HashMap<u64, u64>,
}

impl KvPool {
    pub fn new(capacity_slots: u64) -> Self {
        Self {
            capacity: capacity_slots,
            free: capacity_slots,
            live: HashMap::new(),
        }
    }

    /// Reserves exactly `slots` for `request_id`, or fails leaving the pool
    /// unchanged.
    pub fn alloc(&mut self, request_id: u64, slots: u64) -> Result<KvHandle, PoolError> {
        if self.live.contains_key(&request_id) {
            return Err(PoolError::AlreadyAllocated(request_id));
        }
        if slots > self.free {
            return Err(PoolError::Exhausted {
                requested: slots,
                free: self.free,
            });
        }
        self.free -= slots;
        self.live.insert(request_id, slots);
        Ok(KvHandle { request_id, slots })
    }

    /// Returns a live reservation to the pool. Consumes the handle.
    pub fn free(&mut self, handle: KvHandle) -> Result<(), PoolError> {
        match self.live.remove(&handle.request_id) {
            Some(slots) => {
                debug_assert_eq!(slots, handle.slots);
                self.free += slots;
                Ok(())
            }
            None => Err(PoolError::StaleHandle(handle.request_id)),
        }
    }

    pub fn capacity_slots(&self) -> u64 {
        self.capacity
    }

    pub fn free_slots(&self) -> u64 {
        self.free
    }

    pub fn allocated_slots(&self) -> u64 {
        self.capacity - self.free
    }

    pub fn live_requests(&self) -> usize {
        self.live.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn second_alloc_over_capacity_fails_all_or_nothing() {
        let mut pool = KvPool::new(10);
        pool.alloc(1, 6).unwrap();
        let err = pool.alloc(2, 5).unwrap_err();
        assert_eq!(
            err,
            PoolError::Exhausted {
                requested: 5,
                free: 4
            }
        );
        assert_eq!(pool.free_slots(), 4);
        assert_eq!(pool.live_requests(), 1);
    }

    #[test]
    fn alloc_then_free_restores_free_count() {
        let mut pool = KvPool::new(10);
        let h = pool.alloc(7, 9).unwrap();
        assert_eq!(pool.free_slots(), 1);
        pool.free(h).unwrap();
        assert_eq!(pool.free_slots(), 10);
        assert_eq!(pool.allocated_slots(), 0);
    }

    #[test]
    fn stale_handle_rejected() {
        let mut pool = KvPool::new(4);
        let h = pool.alloc(1, 2).unwrap();
        pool.free(h.clone()).unwrap();
        assert_eq!(pool.free(h), Err(PoolError::StaleHandle(1)));
    }

    #[test]
    fn double_alloc_rejected() {
        let mut pool = KvPool::new(8);
        pool.alloc(3, 1).unwrap();
        assert_eq!(pool.alloc(3, 1), Err(PoolError::AlreadyAllocated(3)));
    }

    /// Random alloc/free sequences checked against an independent counter
    /// model of free capacity.
    #[test]
    fn random_sequences_never_exceed_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..100 {
            let capacity = rng.random_range(1..=64u64);
            let mut pool = KvPool::new(capacity);
            let mut model_free = capacity;
            let mut handles: Vec<KvHandle> = Vec::new();
            for op in 0..200u64 {
                if handles.is_empty() || rng.random_range(0..3u8) > 0 {
                    let id = round * 10_000 + op;
                    let slots = rng.random_range(0..=capacity);
                    match pool.alloc(id, slots) {
                        Ok(h) => {
                            assert!(slots <= model_free);
                            model_free -= slots;
                            handles.push(h);
                        }
                        Err(PoolError::Exhausted { .. }) => assert!(slots > model_free),
                        Err(e) => panic!("unexpected error: {e}"),
                    }
                } else {
                    let idx = rng.random_range(0..handles.len());
                    let h = handles.swap_remove(idx);
                    model_free += h.slots;
                    pool.free(h).unwrap();
                }
                assert_eq!(pool.free_slots(), model_free);
                assert_eq!(pool.allocated_slots() + pool.free_slots(), capacity);
            }
        }
    }
}
