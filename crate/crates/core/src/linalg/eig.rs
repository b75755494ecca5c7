//! Symmetric eigendecompositions.
//!
//! [`symmetric_eigen`] is the production path (Householder tridiagonalization
//! and implicit QR from `nalgebra`). [`jacobi_eigen`] is an independent cyclic
//! Jacobi solver kept as the reference used by checks and tests.

use super::dense::DenseMatrix;
use crate::error::Result;

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are columns.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymmetricEigen {
    /// Leading `k` eigenvectors as an n×k matrix.
    pub fn top_vectors(&self, k: usize) -> DenseMatrix {
        self.vectors.leading_columns(k)
    }

    fn sorted(values: Vec<f64>, vectors: DenseMatrix) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let vals = order.iter().map(|&i| values[i]).collect();
        let vecs = DenseMatrix::from_fn(vectors.rows(), n, |r, c| vectors[(r, order[c])]);
        Self {
            values: vals,
            vectors: vecs,
        }
    }
}

pub fn symmetric_eigen(a: &DenseMatrix) -> Result<SymmetricEigen> {
    a.check_symmetric(1e-10)?;
    let eig = nalgebra::SymmetricEigen::new(a.symmetrized().to_nalgebra());
    let values = eig.eigenvalues.iter().copied().collect();
    Ok(SymmetricEigen::sorted(values, DenseMatrix::from_nalgebra(&eig.eigenvectors)))
}

/// Eigenvalues only, descending.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    a.check_symmetric(1e-10)?;
    let mut values: Vec<f64> = a
        .symmetrized()
        .to_nalgebra()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values)
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn jacobi_eigen(a: &DenseMatrix) -> Result<SymmetricEigen> {
    a.check_symmetric(1e-10)?;
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok(SymmetricEigen::sorted(values, v))
}

/// Sine of the largest principal angle between the column spaces of two
/// matrices with orthonormal columns.
pub fn max_principal_angle_sin(q1: &DenseMatrix, q2: &DenseMatrix) -> f64 {
    let coeff = q1.transpose_matmul(q2).expect("matching rows");
    let mut residual = q2.clone();
    residual.add_scaled(-1.0, &q1.matmul(&coeff).expect("inner dims"));
    residual
        .to_nalgebra()
        .singular_values()
        .iter()
        .fold(0.0f64, |m, s| m.max(*s))
}
