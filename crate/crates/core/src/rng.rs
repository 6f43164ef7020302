//! Seeded random source. ChaCha8 keeps streams identical across platforms.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `n` draws from a zero-mean Gaussian with standard deviation `std`.
    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        assert!(std > 0.0, "std must be positive");
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.inner);
                z * std
            })
            .collect()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// He-style initialization: `N(0, 2 / fan_in)`.
pub fn he_normal(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    rng.normal(n, (2.0 / fan_in as f64).sqrt())
}
