//! Seeded, label-addressed random streams.
//!
//! Every draw in the system is addressed by `(seed, labels...)` so that a
//! mechanism's outcome never depends on how many other draws happened before it.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::rational::Rational;

/// Resolution of [`DetRng::unit`] draws.
pub const UNIT_RESOLUTION: i128 = (1 << 20) - 1;

pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_labels(seed: u64, labels: &[&str]) -> Self {
        Self::new(derive_seed(seed, labels))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..=max`.
    pub fn up_to(&mut self, max: u64) -> u64 {
        if max == 0 {
            // Keep stream consumption independent of the bound.
            self.next_u64();
            return 0;
        }
        if max == u64::MAX {
            return self.next_u64();
        }
        let span = max + 1;
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % span;
            }
        }
    }

    /// Exact rational in `[0, 1]` on a grid of `1 / UNIT_RESOLUTION`.
    pub fn unit(&mut self) -> Rational {
        let raw = i128::from(self.next_u64() >> 44);
        Rational::new(raw, UNIT_RESOLUTION)
    }

    /// Bernoulli trial with an exact rational probability (clamped to `[0, 1]`).
    pub fn chance(&mut self, probability: Rational) -> bool {
        let draw = i128::from(self.next_u64() >> 32);
        if probability <= Rational::ZERO {
            return false;
        }
        if probability >= Rational::ONE {
            return true;
        }
        // draw / 2^32 < p  <=>  draw * denom < numer * 2^32
        draw.saturating_mul(probability.denom()) < probability.numer().saturating_mul(1 << 32)
    }
}
