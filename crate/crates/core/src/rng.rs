//! Portable seeded random numbers.
//!
//! Every random draw in the crate goes through [`Rng`], so any other
//! implementation can reproduce generated data bit-for-bit:
//!
//! * bit source: xoshiro256++ whose 256-bit state is filled by four
//!   successive SplitMix64 outputs of the 64-bit seed;
//! * sub-streams: `Rng::stream(seed, k)` seeds xoshiro with
//!   `seed ^ splitmix64(k)`, where `splitmix64(k)` is the first SplitMix64
//!   output for state `k`;
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
//! * `below(n)`: `(next_u64() as u128 * n) >> 64`;
//! * `normal()`: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, one
//!   value per pair of uniforms;
//! * `poisson(mean)`: Knuth's product-of-uniforms method;
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream `k` of `seed`.
    pub fn stream(seed: u64, k: u64) -> Self {
        let mix = SplitMix64::seed_from_u64(k).next_u64();
        Self::new(seed ^ mix)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Knuth's method; intended for the small means used by the generator.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
