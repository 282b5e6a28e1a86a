//! Platform-independent random streams.
//!
//! Every stochastic draw in the workspace goes through [`NoiseRng`]: a
//! ChaCha20 keystream (RFC 7539 block function, via `rand_chacha`) whose
//! 256-bit key is expanded from a 64-bit seed with SplitMix64. Standard
//! normals use the Box–Muller transform evaluated with the pure-Rust `libm`
//! routines, so a seed yields the same bits on every platform.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::ImageTensor;

/// One round of the SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a master seed and a path of tags.
///
/// The derivation is order sensitive: `(s, [a, b])` and `(s, [b, a])` give
/// unrelated seeds.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for (i, &tag) in tags.iter().enumerate() {
        let salted = tag ^ (i as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        h = splitmix64(h ^ splitmix64(salted));
    }
    h
}

#[derive(Clone, Debug)]
pub struct NoiseRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { inner: ChaCha20Rng::from_seed(key), spare: None }
    }

    /// A stream keyed by `derive_seed(seed, tags)`.
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        Self::new(derive_seed(seed, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on `[0, n)` without modulo bias. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer on the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo) as u64 + 1) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller; draws come in cached pairs.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal() as f32).collect()
    }

    pub fn normal_tensor(&mut self, channels: usize, height: usize, width: usize) -> ImageTensor {
        let data = self.normal_vec(channels * height * width);
        ImageTensor::new(channels, height, width, data).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = NoiseRng::new(7);
        let mut b = NoiseRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn derived_seeds_are_order_sensitive() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[]));
        assert_eq!(derive_seed(9, &[4, 5]), derive_seed(9, &[4, 5]));
    }

    #[test]
    fn normal_moments() {
        let mut rng = NoiseRng::new(42);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors: 1/sqrt(n) for the mean, sqrt(2/n) for the variance.
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = NoiseRng::new(3);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            let v = rng.below(5) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn pinned_first_draws() {
        // Regression guard for the documented generator; any change to the
        // key expansion or the transform breaks reproducibility of runs.
        let mut rng = NoiseRng::new(0);
        assert_eq!(rng.normal().to_bits(), 4607469700803402142);
        assert_eq!(rng.normal().to_bits(), 13824788643366690083);
        assert_eq!(rng.next_u64(), 14414084641719608984);
    }
}
