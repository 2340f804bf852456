//! Named, reproducible random streams.
//!
//! A stream is keyed by `(seed, label)`: the label is hashed together with
//! the seed into a ChaCha8 key, so every pipeline stage draws from its own
//! sequence and re-running one stage never shifts another stage's draws.
//! Per-chain (or per-item) substreams use ChaCha's 64-bit stream selector.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::DataPoint;

pub const PERIPHERY: &str = "periphery";
pub const PERTURBATION: &str = "perturbation";
pub const LANGEVIN: &str = "langevin";
pub const INIT: &str = "init";
pub const NOISE: &str = "rater-noise";
pub const GAN: &str = "gan";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &label));
        RngStream { seed, label, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// A fresh stream labelled `"{label}/{child}"`.
    pub fn substream(&self, child: &str) -> RngStream {
        RngStream::new(self.seed, format!("{}/{}", self.label, child))
    }

    /// A fresh stream sharing this key but on ChaCha stream `index`.
    /// Used for per-chain noise so serial and parallel runs agree.
    pub fn indexed(&self, index: u64) -> RngStream {
        let mut rng = ChaCha8Rng::from_seed(derive_key(self.seed, &self.label));
        rng.set_stream(index);
        RngStream {
            seed: self.seed,
            label: format!("{}#{index}", self.label),
            rng,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.rng.random_range(low..high)
    }

    /// `mean + sigma * g` with `g ~ N(0, I)`.
    pub fn gaussian(&mut self, mean: &DataPoint, sigma: f64) -> Result<DataPoint> {
        gaussian_sample(self, mean, sigma)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draws from `N(mean, sigma^2 I)`.
pub fn gaussian_sample(stream: &mut RngStream, mean: &DataPoint, sigma: f64) -> Result<DataPoint> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("sigma must be positive and finite, got {sigma}")));
    }
    if !mean.is_finite() {
        return Err(Error::Input("gaussian mean has non-finite coordinates".into()));
    }
    let coords = mean
        .coords()
        .iter()
        .map(|m| m + sigma * stream.standard_normal())
        .collect();
    DataPoint::new(coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: &[f64]) -> DataPoint {
        DataPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn same_seed_and_label_reproduce() {
        let mut a = RngStream::new(42, PERIPHERY);
        let mut b = RngStream::new(42, PERIPHERY);
        let origin = pt(&[0.0, 0.0]);
        assert_eq!(
            a.gaussian(&origin, 1.0).unwrap(),
            b.gaussian(&origin, 1.0).unwrap()
        );
    }

    #[test]
    fn labels_and_indices_separate_streams() {
        let mut a = RngStream::new(42, PERIPHERY);
        let mut b = RngStream::new(42, PERTURBATION);
        assert_ne!(a.next_u64(), b.next_u64());

        let base = RngStream::new(7, LANGEVIN);
        let mut c0 = base.indexed(0);
        let mut c1 = base.indexed(1);
        let mut c0_again = base.indexed(0);
        let x = c0.next_u64();
        assert_ne!(x, c1.next_u64());
        assert_eq!(x, c0_again.next_u64());
    }

    #[test]
    fn tiny_sigma_collapses_to_mean() {
        let mut s = RngStream::new(1, "t");
        let out = s.gaussian(&pt(&[1.0, 2.0]), 1e-12).unwrap();
        assert!((out.coords()[0] - 1.0).abs() < 1e-9);
        assert!((out.coords()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_sigma_and_mean() {
        let mut s = RngStream::new(1, "t");
        assert!(s.gaussian(&pt(&[0.0]), 0.0).is_err());
        assert!(s.gaussian(&pt(&[0.0]), -1.0).is_err());
        let bad = DataPoint::zeros(1);
        assert!(s.gaussian(&bad, f64::NAN).is_err());
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let mut s = RngStream::new(3, PERIPHERY);
        let origin = pt(&[0.0, 0.0]);
        let k = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..k {
            let p = s.gaussian(&origin, 10.0).unwrap();
            for j in 0..2 {
                sum[j] += p.coords()[j];
                sq[j] += p.coords()[j] * p.coords()[j];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / k as f64;
            let std = (sq[j] / k as f64 - mean * mean).sqrt();
            assert!((9.9..=10.1).contains(&std), "std {std}");
            // |mean error| < 5 sigma / sqrt(k)
            assert!(mean.abs() < 5.0 * 10.0 / (k as f64).sqrt(), "mean {mean}");
        }
    }
}
