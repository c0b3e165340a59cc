//! Deterministic 64-bit generator shared by every seeded component.
//!
//! The generator is SplitMix64. Its full state is one `u64`, and one step is:
//!
//! ```text
//! state  = state + 0x9E3779B97F4A7C15           (wrapping)
//! z      = state
//! z      = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 (wrapping)
//! z      = (z ^ (z >> 27)) * 0x94D049BB133111EB (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! Floats in `[0, 1)` take the top 53 bits of an output and scale by `2^-53`.
//! Bounded integers use rejection sampling on the top bits, so they carry no
//! modulo bias. Any implementation following these rules reproduces the same
//! draw sequences bit-for-bit.

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output for a given input word, without any state.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of domain words.
///
/// Used wherever a pure function of `(seed, a, b, ...)` needs randomness,
/// e.g. per-step trainer noise and per-clip distractor sampling.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut acc = mix64(seed.wrapping_add(GOLDEN_GAMMA));
    for &w in words {
        acc = mix64(acc ^ w.wrapping_add(GOLDEN_GAMMA));
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`. Panics if `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0) is empty");
        if bound == 1 {
            return 0;
        }
        let bits = 64 - (bound - 1).leading_zeros();
        loop {
            let candidate = self.next_u64() >> (64 - bits);
            if candidate < bound {
                return candidate;
            }
        }
    }

    /// Standard normal via Box-Muller, consuming exactly two outputs.
    pub fn next_gaussian(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
