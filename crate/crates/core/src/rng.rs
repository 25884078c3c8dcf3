//! Seedable 64-bit PRNG used for every random draw in the workspace.
//!
//! The generator is SplitMix64 (Steele et al.). Gaussian variates are produced
//! with the Box-Muller transform, which is the fixed, documented transform for
//! this crate: changing it would silently change every seeded experiment.
//!
//! Stage seeds are derived from a master seed by hashing a stage tag (FNV-1a)
//! into the master seed and running one SplitMix64 mixing round, so each
//! pipeline stage (partitioning, each teacher, aggregation noise, student
//! initialization, latent draws, noise injection) has an independent stream
//! that can be reproduced in isolation.

/// SplitMix64 generator with a cached Box-Muller spare.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    gauss_spare: Option<f64>,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent child seed from `master` for the named stage.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    mix(master ^ fnv1a(tag))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, gauss_spare: None }
    }

    /// Child generator for a named sub-stream.
    pub fn child(&self, tag: &str) -> Rng {
        Rng::new(derive_seed(self.state, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. One spare variate is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
