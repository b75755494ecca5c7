//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha stream keyed by a
//! 64-bit seed. Independent streams (one per Monte-Carlo sample, one per
//! sketch) are derived from a master seed with [`split_seed`], so draws do
//! not depend on which thread generates them or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Random stream used throughout the crate.
pub type Stream = ChaCha20Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha20Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of child stream `index` from `master`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    mix(mix(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Standard-normal sampler using the Box–Muller transform.
///
/// Draws come in pairs; the second value of each pair is cached.
pub struct Gaussian {
    rng: Stream,
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream(seed),
            spare: None,
        }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_seeds_differ() {
        let a = split_seed(7, 0);
        let b = split_seed(7, 1);
        let c = split_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, split_seed(7, 0));
    }

    #[test]
    fn gaussian_moments() {
        let mut g = Gaussian::new(3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| g.next()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn gaussian_is_reproducible() {
        let mut a = Gaussian::new(11);
        let mut b = Gaussian::new(11);
        for _ in 0..100 {
            assert_eq!(a.next().to_bits(), b.next().to_bits());
        }
    }
}
