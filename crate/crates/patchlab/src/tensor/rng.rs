//! Deterministic random number generation.
//!
//! Everything stochastic in this crate (init, shuffling, dropout masks,
//! synthetic data) flows through [`Rng`], a thin wrapper over ChaCha8 that
//! exposes exactly the primitives we need. Streams are derived from a user
//! seed plus a purpose label so that, e.g., data synthesis and weight init
//! never share a stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

/// Stable 64-bit mix of a seed and a purpose string (FNV-1a over the label,
/// then splitmix finalizer). Keeps derived streams independent of each other.
fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for a named purpose.
    pub fn derive(seed: u64, label: &str) -> Self {
        Rng::new(derive_seed(seed, label))
    }

    /// Further split an existing purpose into indexed substreams
    /// (per epoch, per batch, ...).
    pub fn derive_indexed(seed: u64, label: &str, index: u64) -> Self {
        Rng::new(derive_seed(derive_seed(seed, label), &index.to_string()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits of a u64.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Truncated normal with the given std, resampled outside ±2 std.
    /// Standard ViT-style weight init.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle with platform-independent index draws.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
