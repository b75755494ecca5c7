//! Band-aware Cholesky factorization of symmetric positive definite matrices.
//!
//! The lower factor is stored by rows over the band `[i - bw, i]`, where the
//! bandwidth `bw` is detected from the input. Dense inputs get `bw = n - 1`;
//! finite-element matrices on a structured grid get `bw = cells + 2`, which
//! keeps per-sample factorizations cheap.

use super::dense::{axpy, DenseMatrix};
use super::sparse::CsrMatrix;
use crate::error::{LrnsError, Result};

/// Reusable `A = L Lᵀ` factorization.
#[derive(Clone, Debug)]
pub struct SymmetricFactorization {
    dim: usize,
    bandwidth: usize,
    /// Row `i` holds `L[i][i - bandwidth ..= i]` (leading slots unused when
    /// `i < bandwidth`).
    band: Vec<f64>,
}

/// Factorizes a dense SPD matrix.
pub fn factorize_spd(a: &DenseMatrix) -> Result<SymmetricFactorization> {
    a.check_symmetric(1e-10)?;
    let n = a.rows();
    let mut bw = 0;
    for i in 0..n {
        if let Some(j) = a.row(i)[..i].iter().position(|v| *v != 0.0) {
            bw = bw.max(i - j);
        }
    }
    SymmetricFactorization::build(n, bw, |i, j| a[(i, j)])
}

/// Factorizes a sparse SPD matrix without densifying it.
pub fn factorize_spd_csr(a: &CsrMatrix) -> Result<SymmetricFactorization> {
    if a.rows() != a.cols() {
        return Err(LrnsError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut bw = 0;
    for i in 0..n {
        for (j, _) in a.row_entries(i) {
            if j < i {
                bw = bw.max(i - j);
            }
        }
    }
    let mut lower = vec![0.0; n * (bw + 1)];
    for i in 0..n {
        for (j, v) in a.row_entries(i) {
            if j <= i {
                lower[i * (bw + 1) + (j + bw - i)] = v;
            }
        }
    }
    SymmetricFactorization::build(n, bw, |i, j| lower[i * (bw + 1) + (j + bw - i)])
}

impl SymmetricFactorization {
    fn build(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut s = entry(i, j);
                let row_i = &band[i * w..];
                let row_j = &band[j * w..];
                for k in lo..j {
                    s -= row_i[k + bw - i] * row_j[k + bw - j];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LrnsError::NotPositiveDefinite { index: i, pivot: s });
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(Self {
            dim: n,
            bandwidth: bw,
            band,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.bandwidth + 1) + (j + self.bandwidth - i)]
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.dim, "rhs dimension");
        let bw = self.bandwidth;
        let w = bw + 1;
        for i in 0..self.dim {
            let lo = i.saturating_sub(bw);
            let row = &self.band[i * w + (lo + bw - i)..i * w + bw];
            let s: f64 = row.iter().zip(&x[lo..i]).map(|(l, v)| l * v).sum();
            x[i] = (x[i] - s) / self.band[i * w + bw];
        }
        for i in (0..self.dim).rev() {
            x[i] /= self.band[i * w + bw];
            let xi = x[i];
            let lo = i.saturating_sub(bw);
            let row = &self.band[i * w + (lo + bw - i)..i * w + bw];
            for (v, l) in x[lo..i].iter_mut().zip(row) {
                *v -= l * xi;
            }
        }
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.rows(), self.dim, "rhs rows");
        let k = b.cols();
        let mut x = b.clone();
        let bw = self.bandwidth;
        let data = x.as_mut_slice();
        for i in 0..self.dim {
            let lo = i.saturating_sub(bw);
            let (head, tail) = data.split_at_mut(i * k);
            let xi = &mut tail[..k];
            for j in lo..i {
                axpy(xi, -self.l(i, j), &head[j * k..(j + 1) * k]);
            }
            let d = self.l(i, i);
            xi.iter_mut().for_each(|v| *v /= d);
        }
        for i in (0..self.dim).rev() {
            let lo = i.saturating_sub(bw);
            let (head, tail) = data.split_at_mut(i * k);
            let xi = &mut tail[..k];
            let d = self.l(i, i);
            xi.iter_mut().for_each(|v| *v /= d);
            for j in lo..i {
                axpy(&mut head[j * k..(j + 1) * k], -self.l(i, j), xi);
            }
        }
        x
    }

    /// Dense lower-triangular factor.
    pub fn lower(&self) -> DenseMatrix {
        let bw = self.bandwidth;
        DenseMatrix::from_fn(self.dim, self.dim, |i, j| {
            if j <= i && i - j <= bw {
                self.l(i, j)
            } else {
                0.0
            }
        })
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let l = self.lower();
        l.matmul_transpose(&l).expect("square factor")
    }
}
