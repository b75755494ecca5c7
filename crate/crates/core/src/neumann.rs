//! Truncated Neumann-series inversion of low-rank perturbed systems.
//!
//! For `A_m = Ā + U V_mᵀ` the inverse is expanded as
//! `Σ_{r=0}^{R} (−Ā⁻¹ U V_mᵀ)^r Ā⁻¹`. The mean matrix is factorized once and
//! `W = Ā⁻¹ U` is precomputed, so each additional term costs two thin
//! products: `t_{r+1} = −W (V_mᵀ t_r)`.

use std::borrow::Cow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LrnsError, Result};
use crate::linalg::{
    factorize_spd, spectral_norm_estimate, DenseMatrix, LinearOperator, SymmetricFactorization,
};
use crate::lowrank::{LowRankFactors, MatrixCollection};
use crate::parallel::{ordered_fold, ordered_map};
use crate::rng::split_seed;

/// Power iterations used by the convergence guard.
pub const GUARD_ITERATIONS: usize = 30;
/// Default flagging threshold for the spectral-norm estimate.
pub const DEFAULT_GUARD: f64 = 0.95;

/// Per-sample factors `V_m`, stored or applied through `V_m = B_mᵀ U`.
#[derive(Clone, Debug)]
pub enum SampleFactors {
    Stored(Vec<DenseMatrix>),
    /// Products with `V_m` go through the sparse member and the shared basis,
    /// which needs no per-sample dense storage.
    Implicit {
        basis: DenseMatrix,
        members: Arc<MatrixCollection>,
    },
}

impl SampleFactors {
    pub fn len(&self) -> usize {
        match self {
            Self::Stored(v) => v.len(),
            Self::Implicit { members, .. } => members.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Stored(v) => v.first().map(|f| f.rows()),
            Self::Implicit { basis, .. } => Some(basis.rows()),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Self::Stored(v) => v.first().map(|f| f.cols()),
            Self::Implicit { basis, .. } => Some(basis.cols()),
        }
    }

    /// `V_mᵀ x`.
    pub fn project(&self, m: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Stored(v) => v[m].tr_matvec(x),
            Self::Implicit { basis, members } => basis.tr_matvec(&members.member(m).matvec(x)),
        }
    }

    /// `V_m y`.
    pub fn lift(&self, m: usize, y: &[f64]) -> Vec<f64> {
        match self {
            Self::Stored(v) => v[m].matvec(y),
            Self::Implicit { basis, members } => members.member(m).tr_matvec(&basis.matvec(y)),
        }
    }

    /// `V_mᵀ X` for a block of columns.
    pub fn project_block(&self, m: usize, x: &DenseMatrix) -> DenseMatrix {
        match self {
            Self::Stored(v) => v[m].transpose_matmul(x).expect("factor rows match"),
            Self::Implicit { basis, members } => {
                let bx = members.member(m).matmul_dense(x).expect("member columns match");
                basis.transpose_matmul(&bx).expect("basis rows match")
            }
        }
    }

    /// Dense `V_m`.
    pub fn factor(&self, m: usize) -> Cow<'_, DenseMatrix> {
        match self {
            Self::Stored(v) => Cow::Borrowed(&v[m]),
            Self::Implicit { basis, members } => {
                Cow::Owned(members.member(m).tr_matmul_dense(basis).expect("basis rows match"))
            }
        }
    }
}

/// Factorized mean matrix, correction basis `W = Ā⁻¹U`, factors and `R`.
#[derive(Clone, Debug)]
pub struct NeumannOperator {
    mean: Arc<SymmetricFactorization>,
    w: DenseMatrix,
    factors: SampleFactors,
    terms: usize,
    guard: f64,
    guard_seed: u64,
}

/// Factorizes `mean` and builds the operator from stored factors.
pub fn build_operator(
    mean: &DenseMatrix,
    factors: LowRankFactors,
    terms: usize,
    guard: f64,
) -> Result<NeumannOperator> {
    let fact = Arc::new(factorize_spd(mean)?);
    NeumannOperator::new(fact, &factors.basis, SampleFactors::Stored(factors.factors), terms, guard)
}

impl NeumannOperator {
    pub fn new(
        mean: Arc<SymmetricFactorization>,
        basis: &DenseMatrix,
        factors: SampleFactors,
        terms: usize,
        guard: f64,
    ) -> Result<Self> {
        if !(guard > 0.0 && guard <= 1.0) {
            return Err(invalid("guard", format!("must lie in (0, 1], got {guard}")));
        }
        let n = mean.dim();
        if basis.rows() != n {
            return Err(LrnsError::Dimension(format!(
                "basis has {} rows, mean matrix has dimension {n}",
                basis.rows()
            )));
        }
        if factors.dim().is_some_and(|d| d != n) || factors.rank().is_some_and(|k| k != basis.cols()) {
            return Err(LrnsError::Dimension("sample factors do not match the basis".into()));
        }
        let w = mean.solve_matrix(basis);
        Ok(Self {
            mean,
            w,
            factors,
            terms,
            guard,
            guard_seed: 0x6775_6172_6400,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    pub fn samples(&self) -> usize {
        self.factors.len()
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn guard_threshold(&self) -> f64 {
        self.guard
    }

    pub fn correction_basis(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn mean_factorization(&self) -> &SymmetricFactorization {
        &self.mean
    }

    pub fn factors(&self) -> &SampleFactors {
        &self.factors
    }

    /// Same operator with a different truncation index.
    pub fn with_terms(&self, terms: usize) -> Self {
        Self {
            terms,
            ..self.clone()
        }
    }

    /// Power-iteration estimate of `‖Ā⁻¹ U V_mᵀ‖₂`, an upper bound on the
    /// spectral radius that governs convergence.
    pub fn guard_sample(&self, m: usize) -> f64 {
        let op = CorrectionOperator { op: self, m };
        spectral_norm_estimate(&op, GUARD_ITERATIONS, split_seed(self.guard_seed, m as u64))
    }

    /// Guard estimates for every sample.
    pub fn guard_all(&self) -> Result<SolveReport> {
        let rho = ordered_map(self.samples(), |m| Ok(self.guard_sample(m)))?;
        Ok(SolveReport::new(rho, self.guard, self.terms))
    }

    /// `Σ_{r=0}^{R} (−Ā⁻¹UV_mᵀ)^r Ā⁻¹ rhs`.
    pub fn apply_inverse(&self, m: usize, rhs: &[f64]) -> Vec<f64> {
        self.apply_series(m, self.mean.solve(rhs))
    }

    /// Series applied to `t₀ = Ā⁻¹ rhs` that the caller already holds.
    pub fn apply_series(&self, m: usize, t0: Vec<f64>) -> Vec<f64> {
        let mut sum = t0;
        if self.terms == 0 {
            return sum;
        }
        let mut t = sum.clone();
        for _ in 0..self.terms {
            let s = self.factors.project(m, &t);
            t = self.w.matvec(&s);
            t.iter_mut().for_each(|v| *v = -*v);
            crate::linalg::axpy(&mut sum, 1.0, &t);
        }
        sum
    }

    /// Transpose of the truncated inverse applied to `rhs`:
    /// `Ā⁻¹ Σ_{r=0}^{R} (−V_m Wᵀ)^r rhs`.
    pub fn apply_inverse_transpose(&self, m: usize, rhs: &[f64]) -> Vec<f64> {
        let mut sum = rhs.to_vec();
        let mut y = rhs.to_vec();
        for _ in 0..self.terms {
            let s = self.w.tr_matvec(&y);
            y = self.factors.lift(m, &s);
            y.iter_mut().for_each(|v| *v = -*v);
            crate::linalg::axpy(&mut sum, 1.0, &y);
        }
        self.mean.solve(&sum)
    }

    /// Truncated inverse applied to every column of `rhs`.
    pub fn apply_inverse_block(&self, m: usize, rhs: &DenseMatrix) -> DenseMatrix {
        let mut sum = self.mean.solve_matrix(rhs);
        let mut t = sum.clone();
        for _ in 0..self.terms {
            let s = self.factors.project_block(m, &t);
            t = self.w.matmul(&s).expect("basis columns match");
            sum.add_scaled(-1.0, &t);
            t = t.scaled(-1.0);
        }
        sum
    }
}

struct CorrectionOperator<'a> {
    op: &'a NeumannOperator,
    m: usize,
}

impl LinearOperator for CorrectionOperator<'_> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.op.w.matvec(&self.op.factors.project(self.m, x))
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.op.factors.lift(self.m, &self.op.w.tr_matvec(x))
    }
}

/// Guard estimates and truncation settings of a series solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub rho: Vec<f64>,
    pub rho_max: f64,
    pub violations: Vec<usize>,
    pub threshold: f64,
    pub terms: usize,
    /// Set when some estimate is at least 1, where the series may diverge.
    pub divergence_warning: bool,
}

impl SolveReport {
    pub fn new(rho: Vec<f64>, threshold: f64, terms: usize) -> Self {
        let violations = rho
            .iter()
            .enumerate()
            .filter(|(_, r)| **r >= threshold)
            .map(|(m, _)| m)
            .collect();
        let rho_max = rho.iter().fold(0.0f64, |a, b| a.max(*b));
        Self {
            divergence_warning: rho_max >= 1.0,
            rho,
            rho_max,
            violations,
            threshold,
            terms,
        }
    }
}

/// Per-sample solutions of a static collection of systems and their mean.
#[derive(Clone, Debug)]
pub struct CollectionSolution {
    /// `states[m][l]` solves system `m` with load `l`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
    pub report: SolveReport,
}

/// Applies the truncated inverse of every sample to every load.
pub fn solve_collection(op: &NeumannOperator, loads: &[Vec<f64>]) -> Result<CollectionSolution> {
    if loads.is_empty() {
        return Err(invalid("loads", "at least one load vector is required"));
    }
    let report = op.guard_all()?;
    let n = op.dim();
    let base: Vec<Vec<f64>> = loads.iter().map(|b| op.mean.solve(b)).collect();
    let states = ordered_map(op.samples(), |m| {
        Ok(base.iter().map(|t0| op.apply_series(m, t0.clone())).collect::<Vec<_>>())
    })?;
    let scale = 1.0 / op.samples() as f64;
    let mean = ordered_fold(
        states.len(),
        |m| Ok(&states[m]),
        vec![vec![0.0; n]; loads.len()],
        |mut acc, _, s| {
            for (a, u) in acc.iter_mut().zip(s) {
                crate::linalg::axpy(a, 1.0, u);
            }
            acc
        },
    )?
    .into_iter()
    .map(|v| v.into_iter().map(|x| x * scale).collect())
    .collect();
    Ok(CollectionSolution { states, mean, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, norm2, random_spd};

    fn scalar_operator(terms: usize) -> NeumannOperator {
        let factors = LowRankFactors {
            basis: DenseMatrix::identity(1),
            factors: vec![DenseMatrix::identity(1)],
            tau: 1.0,
            rank: 1,
        };
        build_operator(&DenseMatrix::from_diagonal(&[2.0]), factors, terms, 0.95).unwrap()
    }

    /// Operator for `Ā + c U Vᵀ` with `ρ(Ā⁻¹ c U Vᵀ) = rho` exactly.
    fn tuned_operator(n: usize, k: usize, rho: f64, terms: usize) -> (DenseMatrix, DenseMatrix, NeumannOperator) {
        let a = random_spd(n, 3);
        let u = crate::linalg::orthonormalize(&gaussian_matrix(n, k, 4)).unwrap();
        let v = gaussian_matrix(n, k, 5);
        let fact = factorize_spd(&a).unwrap();
        let b = fact.solve_matrix(&u).matmul_transpose(&v).unwrap();
        let eig = nalgebra::DMatrix::from_row_slice(n, n, b.as_slice()).complex_eigenvalues();
        let current = eig.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        let v = v.scaled(rho / current);
        let factors = LowRankFactors {
            basis: u.clone(),
            factors: vec![v.clone()],
            tau: 1.0,
            rank: k,
        };
        let op = build_operator(&a, factors, terms, 0.95).unwrap();
        let mut full = a.clone();
        full.add_scaled(1.0, &u.matmul_transpose(&v).unwrap());
        (a, full, op)
    }

    #[test]
    fn identity_mean_keeps_basis() {
        let u = gaussian_matrix(5, 2, 1);
        let op = NeumannOperator::new(
            Arc::new(factorize_spd(&DenseMatrix::identity(5)).unwrap()),
            &u,
            SampleFactors::Stored(vec![DenseMatrix::zeros(5, 2)]),
            3,
            0.95,
        )
        .unwrap();
        assert_eq!(op.correction_basis(), &u);
        let half = NeumannOperator::new(
            Arc::new(factorize_spd(&DenseMatrix::identity(2).scaled(2.0)).unwrap()),
            &DenseMatrix::identity(2),
            SampleFactors::Stored(vec![DenseMatrix::zeros(2, 2)]),
            3,
            0.95,
        )
        .unwrap();
        assert!(half.correction_basis().sub(&DenseMatrix::identity(2).scaled(0.5)).max_abs() <= 1e-16);
    }

    #[test]
    fn correction_basis_residual() {
        let a = random_spd(50, 2);
        let u = gaussian_matrix(50, 6, 3);
        let fact = Arc::new(factorize_spd(&a).unwrap());
        let op = NeumannOperator::new(fact, &u, SampleFactors::Stored(vec![]), 2, 0.95).unwrap();
        let r = a.matmul(op.correction_basis()).unwrap().sub(&u);
        assert!(r.frobenius_norm() <= 1e-10 * u.frobenius_norm());
    }

    #[test]
    fn scalar_series() {
        let op = scalar_operator(2);
        assert!((op.apply_inverse(0, &[1.0])[0] - 0.375).abs() < 1e-15);
        assert!((op.guard_sample(0) - 0.5).abs() < 1e-12);
        assert!((scalar_operator(0).apply_inverse(0, &[1.0])[0] - 0.5).abs() <= 1e-16);
    }

    #[test]
    fn zero_factors_give_mean_solve() {
        let a = random_spd(8, 1);
        let fact = factorize_spd(&a).unwrap();
        let factors = LowRankFactors {
            basis: gaussian_matrix(8, 3, 2),
            factors: vec![DenseMatrix::zeros(8, 3)],
            tau: 0.4,
            rank: 3,
        };
        let op = build_operator(&a, factors, 4, 0.95).unwrap();
        let b: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(op.apply_inverse(0, &b), fact.solve(&b));
        assert_eq!(op.guard_sample(0), 0.0);
    }

    #[test]
    fn matches_direct_solve_when_contractive() {
        let (_, full, op) = tuned_operator(30, 5, 0.3, 20);
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = op.apply_inverse(0, &b);
        let lu = full.to_nalgebra().lu();
        let exact = lu.solve(&nalgebra::DVector::from_column_slice(&b)).unwrap().as_slice().to_vec();
        let err: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
        assert!(norm2(&err) <= 1e-9 * norm2(&exact));
    }

    #[test]
    fn transpose_and_block_agree_with_vector_path() {
        let (_, _, op) = tuned_operator(12, 3, 0.4, 6);
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs = crate::linalg::dot(&y, &op.apply_inverse(0, &x));
        let rhs = crate::linalg::dot(&op.apply_inverse_transpose(0, &y), &x);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        let block = DenseMatrix::from_columns(&[x.clone(), y.clone()]).unwrap();
        let out = op.apply_inverse_block(0, &block);
        for (j, v) in [x, y].iter().enumerate() {
            let col = op.apply_inverse(0, v);
            for i in 0..12 {
                assert!((out[(i, j)] - col[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn implicit_factors_match_stored() {
        let n = 10;
        let members: Vec<DenseMatrix> = (0..3)
            .map(|m| {
                let g = gaussian_matrix(n, n, 30 + m);
                g.matmul_transpose(&g).unwrap().scaled(0.01).symmetrized()
            })
            .collect();
        let coll = MatrixCollection::from_dense(&members).unwrap();
        let f = crate::lowrank::compress(&coll, 0.5, &crate::linalg::RsvdConfig::with_defaults(5, n, 1)).unwrap();
        let a = random_spd(n, 9);
        let fact = Arc::new(factorize_spd(&a).unwrap());
        let stored = NeumannOperator::new(fact.clone(), &f.basis, SampleFactors::Stored(f.factors.clone()), 5, 0.95).unwrap();
        let implicit = NeumannOperator::new(
            fact,
            &f.basis,
            SampleFactors::Implicit {
                basis: f.basis.clone(),
                members: Arc::new(coll),
            },
            5,
            0.95,
        )
        .unwrap();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        for m in 0..3 {
            let x = stored.apply_inverse(m, &b);
            let y = implicit.apply_inverse(m, &b);
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
            assert!((stored.guard_sample(m) - implicit.guard_sample(m)).abs() < 1e-10);
        }
    }

    #[test]
    fn collection_mean_of_opposite_perturbations() {
        let n = 15;
        let a = random_spd(n, 6);
        let u = crate::linalg::orthonormalize(&gaussian_matrix(n, 2, 7)).unwrap();
        let v = gaussian_matrix(n, 2, 8).scaled(1e-3);
        let factors = LowRankFactors {
            basis: u.clone(),
            factors: vec![v.clone(), v.scaled(-1.0)],
            tau: 1.0,
            rank: 2,
        };
        let op = build_operator(&a, factors, 30, 0.95).unwrap();
        let loads = vec![vec![1.0; n], (0..n).map(|i| i as f64).collect()];
        let sol = solve_collection(&op, &loads).unwrap();
        assert!(sol.report.violations.is_empty());
        for (l, b) in loads.iter().enumerate() {
            let mut expected = vec![0.0; n];
            for sign in [1.0, -1.0] {
                let mut full = a.clone();
                full.add_scaled(sign, &u.matmul_transpose(&v).unwrap());
                let x = full.to_nalgebra().lu().solve(&nalgebra::DVector::from_column_slice(b)).unwrap();
                crate::linalg::axpy(&mut expected, 0.5, x.as_slice());
            }
            let err: Vec<f64> = sol.mean[l].iter().zip(&expected).map(|(p, q)| p - q).collect();
            assert!(norm2(&err) <= 1e-8 * norm2(&expected));
        }
    }

    #[test]
    fn single_unperturbed_sample_is_deterministic_solution() {
        let a = random_spd(6, 2);
        let factors = LowRankFactors {
            basis: gaussian_matrix(6, 2, 1),
            factors: vec![DenseMatrix::zeros(6, 2)],
            tau: 0.3,
            rank: 2,
        };
        let op = build_operator(&a, factors, 5, 0.95).unwrap();
        let loads = vec![vec![1.0; 6]];
        let sol = solve_collection(&op, &loads).unwrap();
        assert_eq!(sol.mean[0], factorize_spd(&a).unwrap().solve(&loads[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let (_, _, op) = tuned_operator(10, 2, 1.5, 3);
        let report = op.guard_all().unwrap();
        assert_eq!(report.violations, vec![0]);
        assert!(report.divergence_warning);
        assert!(report.rho_max >= 1.5 - 1e-6);
    }
}
