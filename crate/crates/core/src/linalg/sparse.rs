//! Compressed sparse row matrices.

use super::dense::DenseMatrix;
use crate::error::{LrnsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed in
    /// input order, so equal inputs give bit-identical matrices.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for t in order {
            let (i, j, v) = triplets[t];
            assert!(i < rows && j < cols, "triplet ({i}, {j}) out of bounds");
            if last == Some((i, j)) {
                *values.last_mut().expect("entry exists") += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Keeps every nonzero entry of `a`.
    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut indptr = Vec::with_capacity(a.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..a.rows() {
            for (j, &v) in a.row(i).iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: a.rows(),
            cols: a.cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(p) => self.values[range.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_add(1.0, x, &mut y);
        y
    }

    /// `y += alpha * A x`.
    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec input");
        assert_eq!(y.len(), self.rows, "matvec output");
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.indptr[i]..self.indptr[i + 1] {
                s += self.values[p] * x[self.indices[p]];
            }
            *yi += alpha * s;
        }
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec input");
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for p in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[p]] += self.values[p] * xi;
            }
        }
        y
    }

    /// `Aᵀ B` for a dense `B`; costs `nnz(A) * B.cols()`.
    pub fn tr_matmul_dense(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.rows {
            return Err(LrnsError::Dimension(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, b.cols());
        for i in 0..self.rows {
            let bi = b.row(i);
            for (j, v) in self.row_entries(i) {
                super::dense::axpy(out.row_mut(j), v, bi);
            }
        }
        Ok(out)
    }

    /// `A B` for a dense `B`.
    pub fn matmul_dense(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.cols {
            return Err(LrnsError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, b.cols());
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                super::dense::axpy(out.row_mut(i), v, b.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                triplets.push((j, i, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, &triplets)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                d[(i, j)] += v;
            }
        }
        d
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `alpha * self + beta * other` over the union of both patterns.
    pub fn linear_combination(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LrnsError::Dimension(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.rows {
            triplets.extend(self.row_entries(i).map(|(j, v)| (i, j, alpha * v)));
            triplets.extend(other.row_entries(i).map(|(j, v)| (i, j, beta * v)));
        }
        Ok(Self::from_triplets(self.rows, self.cols, &triplets))
    }

    /// Sub-matrix selecting `row_idx × col_idx`, in the given order.
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.cols];
        for (new, &old) in col_idx.iter().enumerate() {
            col_map[old] = new;
        }
        let mut triplets = Vec::new();
        for (new_i, &i) in row_idx.iter().enumerate() {
            for (j, v) in self.row_entries(i) {
                if col_map[j] != usize::MAX {
                    triplets.push((new_i, col_map[j], v));
                }
            }
        }
        Self::from_triplets(row_idx.len(), col_idx.len(), &triplets)
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, 2, &[(1, 1, 2.0), (0, 0, 1.0), (1, 1, 3.0), (0, 1, -1.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(1, 1), 5.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![0.0, 5.0]);
    }

    #[test]
    fn dense_roundtrip_and_products() {
        let d = DenseMatrix::from_fn(4, 3, |i, j| if (i + j) % 2 == 0 { (i + 1) as f64 } else { 0.0 });
        let s = CsrMatrix::from_dense(&d);
        assert_eq!(s.to_dense(), d);
        assert_eq!(s.transpose().to_dense(), d.transpose());
        let x = [1.0, -1.0, 2.0];
        assert_eq!(s.matvec(&x), d.matvec(&x));
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(s.tr_matvec(&y), d.tr_matvec(&y));
        let b = DenseMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(s.tr_matmul_dense(&b).unwrap(), d.transpose().matmul(&b).unwrap());
        let c = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        assert_eq!(s.matmul_dense(&c).unwrap(), d.matmul(&c).unwrap());
    }

    #[test]
    fn select_block() {
        let d = DenseMatrix::from_fn(3, 3, |i, j| (3 * i + j) as f64 + 1.0);
        let s = CsrMatrix::from_dense(&d).select(&[0, 2], &[1, 2]);
        assert_eq!(s.to_dense(), DenseMatrix::from_rows(&[vec![2.0, 3.0], vec![8.0, 9.0]]).unwrap());
    }
}
