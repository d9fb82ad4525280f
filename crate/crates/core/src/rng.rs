//! Seeded random source.
//!
//! The stream is fully specified so that draws are bit-identical across runs
//! and platforms:
//!
//! * Core generator: ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), keyed by
//!   `rand_core`'s `seed_from_u64` expansion of the 64-bit seed. ChaCha is a
//!   counter-based construction; [`Rng::fork`] selects an independent stream by
//!   setting the ChaCha stream id, which makes the generator splittable.
//! * Uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`.
//! * Open uniform `(0, 1)`: `((next_u64 >> 11) + 0.5) * 2^-53`.
//! * Integer in `[0, n)`: rejection sampling on `next_u64` with the threshold
//!   `(2^64 - n) mod n`, then `x mod n`.
//! * Standard normal: Box-Muller cosine branch, `sqrt(-2 ln u1) * cos(2 pi u2)`
//!   with `u1, u2` open uniforms. One normal consumes exactly two words. `ln`
//!   and `cos` come from the pure-Rust `libm` port so results do not depend on
//!   the platform math library.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

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

    /// Independent stream `stream` under the same seed, starting at counter 0.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    fn open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * TWO_POW_M53
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_uniform();
        let u2 = self.open_uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle driven by [`Rng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
