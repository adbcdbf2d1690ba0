//! Seeded random number generation.
//!
//! Every random draw in the crate goes through [`Rng`], a thin wrapper over
//! ChaCha8 (`rand_chacha::ChaCha8Rng`). ChaCha8 is a fixed, portable stream
//! cipher construction, so a seed reproduces the same sequence on every
//! platform. The 256-bit key is expanded from the 64-bit seed by
//! `SeedableRng::seed_from_u64`; independent substreams reuse the key and
//! select ChaCha's 64-bit stream id, which gives 2^64 non-overlapping
//! sequences per seed without any dependence on draw order.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Single-owner deterministic generator. Share work across threads by
/// deriving substreams, never by sharing one instance.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `index` of `master_seed`; independent of every other index.
    pub fn substream(master_seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(index);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + u * (hi - lo)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
