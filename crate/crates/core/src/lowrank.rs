//! Generalized low-rank approximation of a matrix collection.
//!
//! Every member `B_m` of the collection is approximated as `U V_mᵀ` with one
//! shared orthonormal basis `U` (N×k) and per-member factors `V_m = B_mᵀ U`.
//! The basis holds the top-k eigenvectors of the Gram accumulation
//! `Σ_m B_m B_mᵀ`, found without iteration by a randomized range finder (or
//! an exact eigensolver). The reduced rank is `k = ⌈τN⌉`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LrnsError, Result};
use crate::linalg::{rsvd_top_eigvecs, symmetric_eigen, CsrMatrix, DenseMatrix, RsvdConfig};
use crate::parallel::ordered_fold;
use crate::registry::Registry;

/// Square sparse matrices of one common dimension.
#[derive(Clone, Debug)]
pub struct MatrixCollection {
    dim: usize,
    members: Vec<CsrMatrix>,
}

impl MatrixCollection {
    pub fn new(members: Vec<CsrMatrix>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| invalid("collection", "must contain at least one matrix"))?;
        let dim = first.rows();
        for (m, b) in members.iter().enumerate() {
            if b.rows() != dim || b.cols() != dim {
                return Err(LrnsError::Dimension(format!(
                    "member {m} is {}x{}, expected {dim}x{dim}",
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(Self { dim, members })
    }

    pub fn from_dense(members: &[DenseMatrix]) -> Result<Self> {
        Self::new(members.iter().map(CsrMatrix::from_dense).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, m: usize) -> &CsrMatrix {
        &self.members[m]
    }

    pub fn members(&self) -> &[CsrMatrix] {
        &self.members
    }

    /// `√((1/M) Σ ‖B_m‖_F²)`, the natural scale for RMSRE values.
    pub fn frobenius_scale(&self) -> f64 {
        let total: f64 = self.members.iter().map(|b| b.frobenius_norm().powi(2)).sum();
        (total / self.len() as f64).sqrt()
    }
}

/// `Σ_m B_m B_mᵀ`.
///
/// Each column `c` of `B_m` contributes the outer product of its nonzeros, so
/// the result is exactly symmetric and costs `Σ_c nnz(c)²` per member.
/// Members are added in order.
pub fn gram_accumulate(coll: &MatrixCollection) -> DenseMatrix {
    let n = coll.dim();
    let mut gram = DenseMatrix::zeros(n, n);
    let mut col: Vec<(usize, f64)> = Vec::new();
    for b in coll.members() {
        let bt = b.transpose();
        for c in 0..n {
            col.clear();
            col.extend(bt.row_entries(c));
            for &(i, vi) in &col {
                let row = gram.row_mut(i);
                for &(j, vj) in &col {
                    row[j] += vi * vj;
                }
            }
        }
    }
    gram
}

/// `k = ⌈τN⌉`, clamped to `[1, N]`.
///
/// A tolerance of `1e-9` absorbs decimal representation error, so that
/// `τ = 0.3` with `N = 10` yields `k = 3`.
pub fn rank_for(tau: f64, n: usize) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid("tau", format!("must lie in (0, 1], got {tau}")));
    }
    let k = (tau * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Strategy producing the top-k eigenvectors of the Gram accumulation.
pub trait BasisFinder: Send + Sync {
    fn name(&self) -> &'static str;

    /// Orthonormal N×k basis of the dominant eigenspace of `gram`.
    fn top_eigenvectors(&self, gram: &DenseMatrix, k: usize, sketch: &RsvdConfig) -> Result<DenseMatrix>;
}

/// Randomized range finder; `sketch.rank` is replaced by `k` and the
/// oversampling is clamped to `N - k`.
pub struct RandomizedFinder;

impl BasisFinder for RandomizedFinder {
    fn name(&self) -> &'static str {
        "rsvd"
    }

    fn top_eigenvectors(&self, gram: &DenseMatrix, k: usize, sketch: &RsvdConfig) -> Result<DenseMatrix> {
        let n = gram.rows();
        let cfg = RsvdConfig {
            rank: k,
            oversampling: sketch.oversampling.min(n.saturating_sub(k)),
            ..*sketch
        };
        rsvd_top_eigvecs(gram, &cfg)
    }
}

/// Full symmetric eigendecomposition.
pub struct ExactFinder;

impl BasisFinder for ExactFinder {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn top_eigenvectors(&self, gram: &DenseMatrix, k: usize, _sketch: &RsvdConfig) -> Result<DenseMatrix> {
        if k == 0 || k > gram.rows() {
            return Err(invalid("rank", format!("must lie in [1, {}], got {k}", gram.rows())));
        }
        Ok(symmetric_eigen(gram)?.top_vectors(k))
    }
}

/// Built-in basis finders: `rsvd` and `exact`.
pub fn basis_finders() -> Registry<dyn BasisFinder> {
    let mut reg: Registry<dyn BasisFinder> = Registry::new("basis finder");
    reg.register("rsvd", Arc::new(RandomizedFinder));
    reg.register("exact", Arc::new(ExactFinder));
    reg
}

/// Shared basis with per-member factors.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    pub basis: DenseMatrix,
    pub factors: Vec<DenseMatrix>,
    pub tau: f64,
    pub rank: usize,
}

impl LowRankFactors {
    /// Builds `V_m = B_mᵀ U` for every member.
    pub fn from_basis(basis: DenseMatrix, coll: &MatrixCollection, tau: f64) -> Result<Self> {
        if basis.rows() != coll.dim() {
            return Err(LrnsError::Dimension(format!(
                "basis has {} rows, collection dimension is {}",
                basis.rows(),
                coll.dim()
            )));
        }
        let factors = crate::parallel::ordered_map(coll.len(), |m| coll.member(m).tr_matmul_dense(&basis))?;
        let rank = basis.cols();
        Ok(Self {
            basis,
            factors,
            tau,
            rank,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Floats stored: `N k` for the basis plus `M N k` for the factors.
    pub fn storage_floats(&self) -> usize {
        self.basis.rows() * self.basis.cols()
            + self.factors.iter().map(|v| v.rows() * v.cols()).sum::<usize>()
    }

    /// `U V_mᵀ`.
    pub fn reconstruct(&self, m: usize) -> DenseMatrix {
        self.basis
            .matmul_transpose(&self.factors[m])
            .expect("factor shapes agree")
    }
}

/// Top-k Gram eigenvectors for `k = ⌈τN⌉`.
pub fn compress_basis(
    coll: &MatrixCollection,
    tau: f64,
    sketch: &RsvdConfig,
    finder: &dyn BasisFinder,
) -> Result<DenseMatrix> {
    compress_basis_rank(coll, rank_for(tau, coll.dim())?, sketch, finder)
}

/// Top-k Gram eigenvectors for an explicit `k`.
pub fn compress_basis_rank(
    coll: &MatrixCollection,
    k: usize,
    sketch: &RsvdConfig,
    finder: &dyn BasisFinder,
) -> Result<DenseMatrix> {
    let gram = gram_accumulate(coll);
    finder.top_eigenvectors(&gram, k, sketch)
}

/// Compresses the collection with the randomized finder.
pub fn compress(coll: &MatrixCollection, tau: f64, sketch: &RsvdConfig) -> Result<LowRankFactors> {
    compress_with(coll, tau, sketch, &RandomizedFinder)
}

pub fn compress_with(
    coll: &MatrixCollection,
    tau: f64,
    sketch: &RsvdConfig,
    finder: &dyn BasisFinder,
) -> Result<LowRankFactors> {
    let basis = compress_basis(coll, tau, sketch, finder)?;
    LowRankFactors::from_basis(basis, coll, tau)
}

/// `√((1/M) Σ_m ‖B_m − U V_mᵀ‖_F²)`, computed from explicit residuals.
pub fn rmsre(factors: &LowRankFactors, coll: &MatrixCollection) -> Result<f64> {
    if factors.dim() != coll.dim() || factors.len() != coll.len() {
        return Err(LrnsError::Dimension(format!(
            "factors cover {} members of dimension {}, collection has {} of dimension {}",
            factors.len(),
            factors.dim(),
            coll.len(),
            coll.dim()
        )));
    }
    let total = ordered_fold(
        coll.len(),
        |m| {
            let mut residual = coll.member(m).to_dense();
            residual.add_scaled(-1.0, &factors.reconstruct(m));
            Ok(residual.frobenius_norm().powi(2))
        },
        0.0,
        |acc, _, sq| acc + sq,
    )?;
    Ok((total / coll.len() as f64).sqrt())
}

/// Cumulative energy `e(τ) = Σ_{i≤⌈τN⌉} λ_i / Σ λ_i` of a descending spectrum.
#[derive(Clone, Debug)]
pub struct EnergyProfile {
    prefix: Vec<f64>,
}

impl EnergyProfile {
    pub fn new(eigenvalues: &[f64]) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(invalid("eigenvalues", "spectrum is empty"));
        }
        let top = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut prefix = Vec::with_capacity(eigenvalues.len());
        let mut sum = 0.0;
        for (i, &v) in eigenvalues.iter().enumerate() {
            // Round-off may leave tiny negative values in a PSD spectrum.
            if v < -1e-12 * top || !v.is_finite() {
                return Err(invalid("eigenvalues", format!("entry {i} is {v:e}, expected nonnegative")));
            }
            sum += v.max(0.0);
            prefix.push(sum);
        }
        if sum <= 0.0 {
            return Err(invalid("eigenvalues", "all eigenvalues are zero; the energy ratio is undefined"));
        }
        Ok(Self { prefix })
    }

    pub fn dim(&self) -> usize {
        self.prefix.len()
    }

    /// Energy captured by the leading `k` eigenvalues.
    pub fn at_rank(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let total = *self.prefix.last().expect("nonempty");
        (self.prefix[k.min(self.prefix.len()) - 1] / total).min(1.0)
    }

    pub fn at(&self, tau: f64) -> Result<f64> {
        Ok(self.at_rank(rank_for(tau, self.dim())?))
    }
}

pub fn energy_profile(eigenvalues: &[f64]) -> Result<EnergyProfile> {
    EnergyProfile::new(eigenvalues)
}

/// Smallest grid value `τ = k/N` with `e(τ) ≥ target`.
pub fn choose_tau(eigenvalues: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(invalid("target_energy", format!("must lie in (0, 1], got {target}")));
    }
    let profile = EnergyProfile::new(eigenvalues)?;
    let n = profile.dim();
    let k = (1..=n).find(|&k| profile.at_rank(k) >= target).unwrap_or(n);
    Ok(k as f64 / n as f64)
}

/// Diagnostics of one compression.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressionReport {
    pub dim: usize,
    pub samples: usize,
    pub tau: f64,
    pub rank: usize,
    pub rmsre: Option<f64>,
    pub energy: f64,
    pub gram_eigenvalues: Vec<f64>,
    pub storage_floats: usize,
}

/// Gram spectrum, cumulative energy and (optionally) RMSRE for `factors`.
pub fn compression_report(
    coll: &MatrixCollection,
    factors: &LowRankFactors,
    with_rmsre: bool,
) -> Result<CompressionReport> {
    let eigs = crate::linalg::symmetric_eigenvalues(&gram_accumulate(coll))?;
    let energy = EnergyProfile::new(&eigs)?.at_rank(factors.rank);
    Ok(CompressionReport {
        dim: coll.dim(),
        samples: coll.len(),
        tau: factors.tau,
        rank: factors.rank,
        rmsre: if with_rmsre { Some(rmsre(factors, coll)?) } else { None },
        energy,
        gram_eigenvalues: eigs,
        storage_floats: factors.storage_floats(),
    })
}
