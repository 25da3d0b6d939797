//! Seeded random streams.
//!
//! Every consumer of randomness draws from ChaCha8, keyed by a 64-bit seed
//! and addressed by a 64-bit stream id. ChaCha is a counter-mode generator,
//! so stream `(seed, id)` yields the same values no matter which thread or
//! in which order it is evaluated. Monte Carlo trajectory `t` of start-pair
//! slot `s` uses stream id `(s << 40) | t`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Bits reserved for the trajectory index inside a stream id.
pub const TRAJECTORY_BITS: u32 = 40;

pub fn trajectory_stream(slot: usize, trajectory: u64) -> u64 {
    debug_assert!(trajectory < (1 << TRAJECTORY_BITS));
    ((slot as u64) << TRAJECTORY_BITS) | trajectory
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        let x = (self.uniform() * n as f64) as usize;
        x.min(n - 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Inverse-CDF sampler over a finite probability vector.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: alloc::vec::Vec<f64>,
}

impl Categorical {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: alloc::vec::Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = f64::INFINITY;
        }
        Self { cdf }
    }

    #[inline]
    pub fn sample(&self, rng: &mut StreamRng) -> usize {
        let u = rng.uniform();
        self.cdf.partition_point(|&c| c <= u)
    }
}
