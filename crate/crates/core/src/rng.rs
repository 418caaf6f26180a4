//! Seeded, portable pseudo-random streams.
//!
//! Every random draw in the engine (toy encoder weights, Perlin gradients,
//! fixture layout, reference pairing) comes from a SplitMix64 stream:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! seeded with the raw 64-bit seed as initial state. Uniform reals in
//! `[0, 1)` are `(next >> 11) * 2^-53`. Ports that follow these two rules
//! reproduce the weights bit-for-bit.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// A SplitMix64 stream with the sampling helpers the engine needs.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::from_seed(seed.to_le_bytes()),
        }
    }

    /// Derives an independent stream for a labelled sub-task, so that adding
    /// draws to one sub-task never shifts another.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        let mut h = seed ^ 0x6A09_E667_F3BC_C908;
        for b in label.bytes() {
            h = mix(h ^ b as u64);
        }
        Self::new(mix(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
