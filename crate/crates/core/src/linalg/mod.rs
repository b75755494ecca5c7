//! Dense and sparse linear-algebra kernels shared by every solver.

mod cholesky;
mod dense;
mod eig;
mod power;
mod qr;
mod rsvd;
mod sparse;

pub use cholesky::{factorize_spd, factorize_spd_csr, SymmetricFactorization};
pub use dense::{axpy, dot, norm2, DenseMatrix};
pub use eig::{
    jacobi_eigen, max_principal_angle_sin, symmetric_eigen, symmetric_eigenvalues, SymmetricEigen,
};
pub use power::{spectral_norm_estimate, LinearOperator};
pub use qr::{orthogonality_defect, orthonormalize, DEFICIENCY_RATIO};
pub use rsvd::{range_basis, rsvd_top_eigvecs, RsvdConfig};
pub use sparse::CsrMatrix;

use crate::rng::Gaussian;

/// Matrix of i.i.d. standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut g = Gaussian::new(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    g.fill(m.as_mut_slice());
    m
}

/// Well-conditioned random SPD matrix `G Gᵀ / n + I / 2`.
pub fn random_spd(n: usize, seed: u64) -> DenseMatrix {
    let g = gaussian_matrix(n, n, seed);
    let mut a = g.matmul_transpose(&g).expect("square").scaled(1.0 / n as f64);
    for i in 0..n {
        a[(i, i)] += 0.5;
    }
    a.symmetrized()
}

/// Random orthonormal `n×n` matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> DenseMatrix {
    orthonormalize(&gaussian_matrix(n, n, seed)).expect("Gaussian matrices have full rank")
}

/// Symmetric matrix `Q diag(spectrum) Qᵀ` with a random orthogonal `Q`.
pub fn psd_with_spectrum(spectrum: &[f64], seed: u64) -> DenseMatrix {
    let n = spectrum.len();
    let q = random_orthogonal(n, seed);
    let scaled = DenseMatrix::from_fn(n, n, |i, j| q[(i, j)] * spectrum[j]);
    scaled.matmul_transpose(&q).expect("square").symmetrized()
}
