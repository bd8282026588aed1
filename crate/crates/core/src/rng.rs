//! Seeded randomness with a pinned, documented algorithm.
//!
//! All stochastic behavior in the crate (initial noise, weight init, hash
//! embeddings, dataset synthesis, batch selection) flows through
//! [`NoiseRng`]: a ChaCha8 stream cipher RNG with Box–Muller for normals.
//! ChaCha8 has a fixed published specification and `rand_chacha` guarantees
//! reproducible streams, so a seed pins every downstream byte on every
//! platform.
//!
//! Uniform doubles take the top 53 bits of `next_u64` (`u >> 11` scaled by
//! 2^-53). Normal pairs come from the plain Box–Muller transform; the
//! second value of each pair is cached so consumption order is exact.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct NoiseRng {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl NoiseRng {
    pub fn seed(seed: u64) -> Self {
        NoiseRng { rng: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n), rejection-sampled so every value is
    /// exactly equally likely.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            *v = self.next_normal();
        }
    }
}

/// Derive an independent stream seed from a base seed and a stream index.
///
/// SplitMix64 finalizer over `base + GOLDEN_GAMMA * (stream + 1)`; the same
/// mixing used to seed the per-step and per-item RNGs so that substreams
/// never alias.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash arbitrary bytes to a seed (FNV-1a 64), for token-keyed embeddings.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
