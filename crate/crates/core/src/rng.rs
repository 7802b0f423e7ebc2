//! Splittable deterministic random streams.
//!
//! A [`Rng`] is a ChaCha8 keystream. [`Rng::split`] derives a child stream
//! from the parent's key and a numeric id only, never from how far the
//! parent has been consumed, so `(seed, id path)` alone fixes every draw.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream for `id`. Pure in (parent key, id).
    pub fn split(&self, id: u64) -> Rng {
        let mut keyed = ChaCha8Rng::from_seed(self.inner.get_seed());
        keyed.set_stream(id.wrapping_add(1));
        let mut child = [0u8; 32];
        keyed.fill_bytes(&mut child);
        Rng {
            inner: ChaCha8Rng::from_seed(child),
        }
    }

    /// Uniform draw in `[lo, hi]`; `lo == hi` returns `lo` exactly.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
            return Err(Error::InvalidRange { lo, hi });
        }
        if lo == hi {
            return Ok(lo);
        }
        let u: f64 = self.inner.random();
        Ok((lo + (hi - lo) * u).min(hi))
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    }
}
