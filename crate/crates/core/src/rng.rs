//! Deterministic random streams.
//!
//! Every consumer of randomness draws from its own counter-based stream,
//! addressed by `(seed, Stream, index)`. Streams never share state, so
//! disabling one consumer cannot shift the draws seen by another; paired
//! runs that differ in a single code path stay noise-aligned everywhere
//! else.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Logical purpose of a random stream. Discriminants are part of the
/// determinism contract and must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Parameter initialization.
    Init = 0,
    /// Dataset synthesis (scene specs, placement jitter).
    Data = 1,
    /// Training noise and timestep draws.
    Noise = 2,
    /// Sampling noise (initial latents).
    Sample = 3,
    /// Conditioning dropout during pretraining.
    Dropout = 4,
    /// Composite placement for subject tuning data.
    Mix = 5,
    /// Motion prior generation.
    Motion = 6,
    /// Benchmark construction (held-out subjects, prompt lists).
    Bench = 7,
    /// Minibatch selection during training.
    Batch = 8,
    /// Perturbations used while calibrating evaluation thresholds.
    Eval = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded random stream. Identical `(seed, stream, index)` triples
/// produce identical draw sequences on every run.
pub struct RngStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::item(seed, stream, 0)
    }

    /// Substream `index` of a purpose stream, for per-item independence
    /// (one stream per sampled video, per dataset item, and so on).
    pub fn item(seed: u64, stream: Stream, index: u64) -> Self {
        let mut state = seed ^ 0x6A09_E667_F3BC_C908;
        let mut key = [0u8; 32];
        state ^= (stream as u64).wrapping_mul(0x8000_0000_B8FA_3B8B);
        state ^= index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw (Box-Muller, f64 internals).
    pub fn normal(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z as f32;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        (r * c) as f32
    }

    pub fn fill_normal(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn fill_uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.range(lo as f64, hi as f64) as f32).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// One draw from a weighted-free uniform choice.
    pub fn choose<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }
}
