//! Seeded random streams.
//!
//! All stochastic behaviour (initialisation, dropout, stochastic depth,
//! sampling, augmentation) draws from a [`SeededRng`] passed in explicitly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Stream keyed by `(seed, stream)`, independent of any draws made so far.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(mix_seed(seed, stream))
    }

    /// Stream keyed by a name, e.g. a parameter name, so initialising one
    /// tensor never shifts the draws of another.
    pub fn named(seed: u64, name: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self::derived(seed, h)
    }

    /// Splits off a child stream; advances `self` by one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.inner.random::<f64>();
        let u2 = self.inner.random::<f64>();
        (libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)) as f32
    }

    /// Normal with standard deviation `std`, resampled until within `±bound·std`.
    pub fn trunc_normal(&mut self, std: f32, bound: f32) -> f32 {
        loop {
            let z = self.normal();
            if libm::fabsf(z) <= bound {
                return z * std;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..16 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut r = SeededRng::new(1);
        for _ in 0..10_000 {
            assert!(r.trunc_normal(0.02, 2.0).abs() <= 0.04);
        }
    }

    #[test]
    fn derived_streams_differ() {
        let a = SeededRng::derived(3, 0).next_u64();
        let b = SeededRng::derived(3, 1).next_u64();
        assert_ne!(a, b);
    }
}
