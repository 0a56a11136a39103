//! Labeled, seedable random streams.
//!
//! Every consumer of randomness owns an [`RngStream`] identified by a
//! `(master seed, label)` pair. The ChaCha key is the SHA-256 digest of the
//! pair, so streams with different labels are independent and a stream is
//! reproduced bit-for-bit by replaying the same label under the same seed.
//!
//! Gaussian variates use the Box–Muller transform on the uniform stream; both
//! outputs of each transform are consumed in order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

/// 32-byte ChaCha key for `(seed, label)`.
pub fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"podsr-stream-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &label));
        Self {
            seed,
            label,
            rng,
            spare: None,
        }
    }

    /// Fresh stream labeled `"{self.label}/{suffix}"` under the same master seed.
    ///
    /// The child does not depend on how much of the parent has been consumed.
    pub fn child(&self, suffix: impl AsRef<str>) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, suffix.as_ref()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index on empty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn randn(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_gaussian();
        }
    }

    pub fn rand_uniform(&mut self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "uniform range requires lo < hi, got [{lo}, {hi})"
            )));
        }
        Ok((0..n)
            .map(|_| lo + (hi - lo) * self.next_uniform())
            .collect())
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7, "noise");
        let mut b = RngStream::new(7, "noise");
        assert_eq!(a.randn(100), b.randn(100));
    }

    #[test]
    fn labels_and_seeds_separate_streams() {
        let x = RngStream::new(7, "noise").randn(8);
        let y = RngStream::new(7, "init").randn(8);
        let z = RngStream::new(8, "noise").randn(8);
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn child_is_independent_of_parent_position() {
        let mut parent = RngStream::new(3, "data");
        let c1 = parent.child("traj/0").randn(4);
        parent.randn(1000);
        let c2 = parent.child("traj/0").randn(4);
        assert_eq!(c1, c2);
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngStream::new(11, "moments");
        let n = 1_000_000;
        let xs = s.randn(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.004, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.006, "var {var}");
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut s = RngStream::new(12, "uniform");
        let xs = s.rand_uniform(-1.0, 1.0, 1_000_000).unwrap();
        assert!(xs.iter().all(|&x| (-1.0..1.0).contains(&x)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() <= 0.002, "mean {mean}");
    }

    #[test]
    fn uniform_rejects_empty_range() {
        let mut s = RngStream::new(1, "u");
        assert!(s.rand_uniform(1.0, 1.0, 3).is_err());
        assert!(s.rand_uniform(2.0, 1.0, 3).is_err());
    }

    #[test]
    fn index_is_in_range() {
        let mut s = RngStream::new(5, "idx");
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[s.next_index(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
