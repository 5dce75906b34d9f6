//! Counter-based pseudo-random streams.
//!
//! Every random draw in this crate comes from [`SplitMix64`] in its
//! counter form: the n-th output is a pure function of `(key, n)`, so a
//! stream's entire state is two u64 words. That makes sampler replay and
//! checkpointing exact: persist `(key, counter)`, restore, and the stream
//! continues bit-for-bit on any platform.
//!
//! Independent streams (minibatch shuffling, Langevin noise, input
//! perturbation, per-layer init) are derived from a root seed and a purpose
//! tag so that consuming one stream never shifts another.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output mix.
fn mix(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based SplitMix64 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMix64 {
    key: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            key: mix(seed.wrapping_add(GAMMA)),
            counter: 0,
        }
    }

    /// Derive an independent stream keyed by `(seed, tag)`.
    pub fn derive(seed: u64, tag: &str) -> Self {
        SplitMix64 {
            key: mix(mix(seed.wrapping_add(GAMMA)) ^ fnv1a(tag.as_bytes())),
            counter: 0,
        }
    }

    /// Derive an independent stream keyed by `(seed, index)`, e.g. per layer.
    pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> Self {
        SplitMix64 {
            key: mix(mix(seed.wrapping_add(GAMMA)) ^ fnv1a(tag.as_bytes()) ^ mix(index)),
            counter: 0,
        }
    }

    /// Serializable state.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        SplitMix64 { key, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two counter values.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound) via multiply-shift.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i + 1);
            slice.swap(i, j);
        }
    }
}
