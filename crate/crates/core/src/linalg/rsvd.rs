//! Randomized range finder for the dominant eigenvectors of a symmetric
//! positive semidefinite matrix.
//!
//! Two stages: sketch `Z = S P` with a Gaussian test matrix and
//! orthonormalize it to `Q`; then take the SVD of the projection
//! `Y = Qᵀ S = U_Y Σ V_Yᵀ` and return the leading columns of `Q U_Y`.
//! Oversampling and power iterations are optional refinements; with
//! `oversampling = 0` and `power_iterations = 0` the sketch has exactly `k`
//! columns.

use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use super::qr::orthonormalize_filling;
use crate::error::{invalid, LrnsError, Result};
use crate::rng::Gaussian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsvdConfig {
    pub rank: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl RsvdConfig {
    /// Default refinement for an `n`-dimensional problem: `p = min(10, n - k)`
    /// and one power iteration.
    pub fn with_defaults(rank: usize, n: usize, seed: u64) -> Self {
        Self {
            rank,
            oversampling: 10.min(n.saturating_sub(rank)),
            power_iterations: 1,
            seed,
        }
    }

    /// Plain sketch of width `rank`.
    pub fn plain(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            oversampling: 0,
            power_iterations: 0,
            seed,
        }
    }

    pub fn sketch_width(&self) -> usize {
        self.rank + self.oversampling
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid("rank", "must be at least 1"));
        }
        if self.sketch_width() > n {
            return Err(invalid(
                "oversampling",
                format!(
                    "rank {} + oversampling {} exceeds dimension {n}",
                    self.rank, self.oversampling
                ),
            ));
        }
        Ok(())
    }
}

/// Approximate top-`k` eigenvectors (n×k, orthonormal columns) of `s`.
pub fn rsvd_top_eigvecs(s: &DenseMatrix, cfg: &RsvdConfig) -> Result<DenseMatrix> {
    s.check_symmetric(1e-10)?;
    let n = s.rows();
    cfg.validate(n)?;
    let q = range_basis(s, cfg)?;
    let width = q.cols();

    // Yᵀ = Sᵀ Q = S Q for symmetric S.
    let yt = s.matmul(&q)?;
    let svd = nalgebra::SVD::new(yt.to_nalgebra(), false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| LrnsError::Format("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    // Left singular vectors of Y are the rows of v_t (right vectors of Yᵀ).
    let u_y = DenseMatrix::from_fn(width, cfg.rank, |i, j| v_t[(order[j], i)]);
    q.matmul(&u_y)
}

/// Orthonormal basis `Q` (n×(k+p)) of the sketched range, after power
/// iterations.
pub fn range_basis(s: &DenseMatrix, cfg: &RsvdConfig) -> Result<DenseMatrix> {
    let n = s.rows();
    cfg.validate(n)?;
    let mut rng = Gaussian::new(cfg.seed);
    let mut test = DenseMatrix::zeros(n, cfg.sketch_width());
    rng.fill(test.as_mut_slice());
    let mut q = orthonormalize_filling(&s.matmul(&test)?, &mut rng);
    for _ in 0..cfg.power_iterations {
        // One iteration applies S Sᵀ = S².
        for _ in 0..2 {
            q = orthonormalize_filling(&s.matmul(&q)?, &mut rng);
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{jacobi_eigen, max_principal_angle_sin, orthogonality_defect, psd_with_spectrum};

    #[test]
    fn diagonal_first_eigenvector() {
        let s = DenseMatrix::from_diagonal(&[4.0, 1.0, 0.0]);
        let u = rsvd_top_eigvecs(&s, &RsvdConfig::with_defaults(1, 3, 5)).unwrap();
        assert!((u[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(u[(1, 0)].abs() < 1e-12 && u[(2, 0)].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = DenseMatrix::identity(4);
        assert!(rsvd_top_eigvecs(&s, &RsvdConfig::plain(0, 1)).is_err());
        let cfg = RsvdConfig {
            rank: 3,
            oversampling: 2,
            power_iterations: 0,
            seed: 1,
        };
        assert!(rsvd_top_eigvecs(&s, &cfg).is_err());
        s[(0, 1)] = 0.5;
        assert!(matches!(
            rsvd_top_eigvecs(&s, &RsvdConfig::plain(1, 1)),
            Err(LrnsError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn exact_low_rank_is_captured() {
        let mut spectrum = vec![0.0; 40];
        spectrum[..4].copy_from_slice(&[5.0, 3.0, 2.0, 1.0]);
        let s = psd_with_spectrum(&spectrum, 8);
        let u = rsvd_top_eigvecs(&s, &RsvdConfig::with_defaults(6, 40, 2)).unwrap();
        assert!(orthogonality_defect(&u) < 1e-12);
        let proj = u.matmul(&u.transpose_matmul(&s).unwrap()).unwrap();
        assert!(proj.sub(&s).frobenius_norm() <= 1e-8 * s.frobenius_norm());
    }

    #[test]
    fn full_width_sketch_recovers_everything() {
        let s = crate::linalg::random_spd(30, 4);
        let cfg = RsvdConfig::plain(30, 9);
        let u = rsvd_top_eigvecs(&s, &cfg).unwrap();
        let proj = u.matmul(&u.transpose_matmul(&s).unwrap()).unwrap();
        assert!(proj.sub(&s).frobenius_norm() <= 1e-9 * s.frobenius_norm());
        // Columns are ordered like the exact eigenvectors.
        let exact = jacobi_eigen(&s).unwrap();
        assert!(max_principal_angle_sin(&exact.top_vectors(3), &u.leading_columns(3)) < 1e-8);
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let s = crate::linalg::random_spd(25, 6);
        let cfg = RsvdConfig::with_defaults(5, 25, 77);
        let a = rsvd_top_eigvecs(&s, &cfg).unwrap();
        let b = rsvd_top_eigvecs(&s, &cfg).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
