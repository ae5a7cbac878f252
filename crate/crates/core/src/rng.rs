//! Seeded random stream.
//!
//! All randomness in the crate flows through [`SeededRng`], a thin wrapper
//! over ChaCha8 seeded with `seed_from_u64`. ChaCha output is specified
//! bit-for-bit, so a seed reproduces the same draws on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Split off an independent child stream, advancing this one by one draw.
    pub fn fork(&mut self) -> SeededRng {
        let child = self.inner.next_u64();
        SeededRng::new(child)
    }

    /// A fair coin.
    pub fn coin(&mut self) -> bool {
        self.inner.random_bool(0.5)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
