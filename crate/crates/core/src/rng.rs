//! Seeded random streams keyed by `(seed, purpose)`.
//!
//! Every consumer asks for its own stream by label, so adding a draw in one
//! module never shifts the numbers another module sees.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, "root")
    }

    /// Independent stream for `purpose` under the root `seed`.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update((purpose.len() as u64).to_le_bytes());
        hasher.update(purpose.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        Rng {
            seed,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Sub-stream of this stream's root seed.
    pub fn split(&self, purpose: &str) -> Self {
        Self::derive(self.seed, purpose)
    }

    /// Integer sub-seed for a named stage.
    pub fn sub_seed(seed: u64, stage: &str) -> u64 {
        Self::derive(seed, stage).next_u64()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
