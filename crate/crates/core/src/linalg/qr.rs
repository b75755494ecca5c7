//! Thin QR orthonormalization (Gram–Schmidt with reorthogonalization).

use super::dense::{axpy, dot, norm2, DenseMatrix};
use crate::error::{LrnsError, Result};
use crate::rng::Gaussian;

/// Residual-to-norm ratio below which a column counts as dependent.
pub const DEFICIENCY_RATIO: f64 = 1e-14;

/// Returns `Q` (n×k) with orthonormal columns spanning the columns of `a`.
///
/// Fails with [`LrnsError::RankDeficient`] naming the first column whose
/// component orthogonal to its predecessors falls below
/// [`DEFICIENCY_RATIO`] times its norm.
pub fn orthonormalize(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, k) = a.shape();
    if k == 0 || n < k {
        return Err(LrnsError::Dimension(format!(
            "orthonormalize needs n >= k >= 1, got {n}x{k}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.column(j);
        let norm = norm2(&v);
        let residual = project_out(&mut v, &basis);
        if norm == 0.0 || residual <= DEFICIENCY_RATIO * norm {
            return Err(LrnsError::RankDeficient {
                column: j,
                residual,
                norm,
            });
        }
        basis.push(v);
    }
    DenseMatrix::from_columns(&basis)
}

/// Like [`orthonormalize`] but replaces dependent columns by random
/// directions orthogonal to the accepted ones. Used for sketches of
/// low-rank matrices, where dependence is expected.
pub(crate) fn orthonormalize_filling(a: &DenseMatrix, rng: &mut Gaussian) -> DenseMatrix {
    let (n, k) = a.shape();
    assert!(n >= k && k >= 1);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.column(j);
        let mut norm = norm2(&v);
        loop {
            let residual = project_out(&mut v, &basis);
            if norm > 0.0 && residual > 1e-10 * norm {
                break;
            }
            v = (0..n).map(|_| rng.next()).collect();
            norm = norm2(&v);
        }
        basis.push(v);
    }
    DenseMatrix::from_columns(&basis).expect("columns share length")
}

/// Two passes of classical Gram–Schmidt against `basis`, then normalizes
/// `v` in place. Returns the residual norm before normalization.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, v)).collect();
        for (q, c) in basis.iter().zip(coeffs) {
            axpy(v, -c, q);
        }
    }
    let r = norm2(v);
    if r > 0.0 {
        v.iter_mut().for_each(|x| *x /= r);
    }
    r
}

/// `‖QᵀQ − I‖_F`.
pub fn orthogonality_defect(q: &DenseMatrix) -> f64 {
    let gram = q.transpose_matmul(q).expect("square gram");
    gram.sub(&DenseMatrix::identity(q.cols())).frobenius_norm()
}
