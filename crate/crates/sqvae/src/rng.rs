//! Counter-based pseudo-random streams.
//!
//! Every random consumer in a run draws from its own stream, keyed by
//! `(master seed, purpose, index)`. Streams are derived by hashing the key
//! with SplitMix64-style mixing, so adding a new consumer never perturbs the
//! draws of an existing one, and any stream can be reconstructed from the
//! counters alone (no RNG state needs to be checkpointed).

/// Purposes with fixed stream offsets. The discriminant is part of the
/// on-disk reproducibility contract: do not reorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter and codebook initialization (index 0).
    Init = 1,
    /// Per-epoch minibatch shuffling (index = epoch).
    Shuffle = 2,
    /// Per-step Gumbel noise (index = global step).
    Gumbel = 3,
    /// Per-step codebook reset noise (index = global step).
    Reset = 4,
    /// Synthetic dataset generation (index 0; seeded by the dataset seed).
    Data = 5,
    /// Per-step reparameterization noise (index = global step).
    Noise = 6,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator over a derived counter.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Stream keyed by `(master, purpose, index)`.
    pub fn stream(master: u64, purpose: Stream, index: u64) -> Self {
        let s = mix(master ^ GAMMA)
            ^ mix((purpose as u64).wrapping_mul(GAMMA))
            ^ mix(index.wrapping_mul(0xD605_BBB5_8C8A_BC2D));
        Rng { state: mix(s) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in the half-open interval `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`; safe to pass through `ln`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Modulo bias is irrelevant at the `n`
    /// values used here (dataset sizes, class counts).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (the paired draw is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel: `-ln(-ln U)` with `U` in `(0, 1)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    /// Seeded Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
