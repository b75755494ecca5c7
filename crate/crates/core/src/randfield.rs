//! Truncated Karhunen–Loève representation of the random permeability.
//!
//! The covariance operator is discretized by the Nyström method on the mesh
//! nodes with uniform weights `w = 1/P` (P nodes): the eigenproblem
//! `Σ_j C(x_i, x_j) w r(x_j) = λ r(x_i)` is symmetric after scaling, and the
//! eigenfunctions are normalized so that `Σ_i w r_t(x_i) r_s(x_i) = δ_ts`.
//! A perturbation field is `ã = σ Σ_t √λ_t r_t Y_t` with draws `Y_t` from the
//! standard normal truncated to `[−b, b]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LrnsError, Result};
use crate::fem::StructuredMesh;
use crate::io::fmt_f64;
use crate::linalg::{symmetric_eigen, DenseMatrix};
use crate::rng::{split_seed, Gaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `exp(−|x − y| / ℓ)` with the Euclidean distance.
    Exponential,
    /// `exp(−|x − y|² / (2ℓ²))`.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub correlation_length: f64,
    pub kernel: Kernel,
}

impl CovarianceSpec {
    pub fn exponential(correlation_length: f64) -> Self {
        Self {
            correlation_length,
            kernel: Kernel::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.correlation_length > 0.0 && self.correlation_length.is_finite()) {
            return Err(invalid(
                "correlation_length",
                format!("must be positive, got {}", self.correlation_length),
            ));
        }
        Ok(())
    }

    pub fn eval(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        match self.kernel {
            Kernel::Exponential => (-d2.sqrt() / self.correlation_length).exp(),
            Kernel::Gaussian => (-d2 / (2.0 * self.correlation_length.powi(2))).exp(),
        }
    }
}

/// Leading covariance eigenpairs on the mesh nodes.
#[derive(Clone, Debug)]
pub struct KLBasis {
    /// Descending, positive.
    pub values: Vec<f64>,
    /// Column `t` holds `r_t` at every node.
    pub functions: DenseMatrix,
    /// Quadrature weight of every node.
    pub weight: f64,
}

impl KLBasis {
    pub fn terms(&self) -> usize {
        self.values.len()
    }

    pub fn nodes(&self) -> usize {
        self.functions.rows()
    }

    /// `Σ_t λ_t r_t(x)²` at every node.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        (0..self.nodes())
            .map(|i| {
                self.values
                    .iter()
                    .enumerate()
                    .map(|(t, l)| l * self.functions[(i, t)].powi(2))
                    .sum()
            })
            .collect()
    }

    /// Writes `index,eigenvalue,cumulative_share` rows; the share is relative
    /// to the retained eigenvalues.
    pub fn write_spectrum_csv(&self, out: &mut impl Write) -> Result<()> {
        let total: f64 = self.values.iter().sum();
        let mut acc = 0.0;
        writeln!(out, "index,eigenvalue,cumulative_share")?;
        for (t, l) in self.values.iter().enumerate() {
            acc += l;
            writeln!(out, "{},{},{}", t + 1, fmt_f64(*l), fmt_f64(acc / total))?;
        }
        Ok(())
    }
}

pub fn kl_decompose(mesh: &StructuredMesh, cov: &CovarianceSpec, terms: usize) -> Result<KLBasis> {
    kl_decompose_points(mesh.coords(), cov, terms)
}

/// Nyström eigenpairs at arbitrary points with uniform weights.
pub fn kl_decompose_points(points: &[[f64; 2]], cov: &CovarianceSpec, terms: usize) -> Result<KLBasis> {
    cov.validate()?;
    let p = points.len();
    if p == 0 {
        return Err(invalid("points", "at least one point is required"));
    }
    if terms == 0 {
        return Err(invalid("kl_terms", "must be at least 1"));
    }
    let weight = 1.0 / p as f64;
    let scaled = DenseMatrix::from_fn(p, p, |i, j| weight * cov.eval(points[i], points[j]));
    let eig = symmetric_eigen(&scaled)?;
    let cutoff = 1e-12 * eig.values[0].abs();
    let available = eig.values.iter().take_while(|&&l| l > cutoff).count();
    if terms > available {
        return Err(LrnsError::InsufficientSpectrum {
            requested: terms,
            available,
        });
    }
    let norm = weight.sqrt();
    let mut functions = DenseMatrix::zeros(p, terms);
    for t in 0..terms {
        let mut col = eig.vectors.column(t);
        // Fix the sign so that the entry of largest magnitude is positive.
        let pivot = col.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter_mut().for_each(|v| *v *= sign / norm);
        functions.set_column(t, &col);
    }
    Ok(KLBasis {
        values: eig.values[..terms].to_vec(),
        functions,
        weight,
    })
}

/// Standard normal draws rejected outside `[−bound, bound]`.
pub fn sample_truncated_normal(seed: u64, count: usize, bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0) {
        return Err(invalid("bound", format!("must be positive, got {bound}")));
    }
    let mut g = Gaussian::new(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let z = g.next();
        if z.abs() <= bound {
            out.push(z);
        }
    }
    Ok(out)
}

/// Variance of the standard normal truncated to `[−b, b]`:
/// `1 − 2 b φ(b) / (2Φ(b) − 1)`, with the probability mass integrated by
/// composite Simpson.
pub fn truncated_normal_variance(bound: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let n = 20_000;
    let h = bound / n as f64;
    let mut mass = pdf(0.0) + pdf(bound);
    for i in 1..n {
        mass += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    let mass = 2.0 * mass * h / 3.0;
    1.0 - 2.0 * bound * pdf(bound) / mass
}

/// One realization of the perturbation field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub seed: u64,
    pub draws: Vec<f64>,
    /// Nodal values of `ã`.
    pub values: Vec<f64>,
}

/// `ã = σ Σ_t √λ_t r_t Y_t` at every node.
pub fn sample_field(basis: &KLBasis, sigma: f64, draws: &[f64], seed: u64) -> Result<FieldSample> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid("sigma", format!("must lie in [0, 1], got {sigma}")));
    }
    if draws.len() != basis.terms() {
        return Err(LrnsError::Dimension(format!(
            "{} draws for {} KL terms",
            draws.len(),
            basis.terms()
        )));
    }
    let coeff: Vec<f64> = basis
        .values
        .iter()
        .zip(draws)
        .map(|(l, y)| sigma * l.sqrt() * y)
        .collect();
    let values = (0..basis.nodes())
        .map(|i| {
            basis
                .functions
                .row(i)
                .iter()
                .zip(&coeff)
                .map(|(r, c)| r * c)
                .sum()
        })
        .collect();
    Ok(FieldSample {
        seed,
        draws: draws.to_vec(),
        values,
    })
}

/// Samples `m = 0..count`, each from its own seed `split_seed(master, m)`.
pub fn sample_fields(
    basis: &KLBasis,
    sigma: f64,
    bound: f64,
    master_seed: u64,
    count: usize,
) -> Result<Vec<FieldSample>> {
    crate::parallel::ordered_map(count, |m| {
        let seed = split_seed(master_seed, m as u64);
        let draws = sample_truncated_normal(seed, basis.terms(), bound)?;
        sample_field(basis, sigma, &draws, seed)
    })
}

/// Handling of realizations with a nonpositive total permeability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllipticityPolicy {
    /// Refuse the whole sample set.
    Reject,
    /// Replace each offending realization by a fresh draw from a seed derived
    /// from its own, which conditions the draws on positivity.
    Resample,
}

/// Redraw attempts per realization before giving up.
pub const MAX_REDRAWS: u64 = 1000;

/// Replaces nonpositive realizations in place and returns how many draws
/// were discarded.
pub fn resample_nonelliptic(
    basis: &KLBasis,
    sigma: f64,
    bound: f64,
    mean: &[f64],
    samples: &mut [FieldSample],
) -> Result<usize> {
    let positive = |s: &FieldSample| mean.iter().zip(&s.values).all(|(a, b)| a + b > 0.0);
    let mut discarded = 0;
    for sample in samples.iter_mut() {
        let origin = sample.seed;
        let mut attempt = 0;
        while !positive(sample) {
            attempt += 1;
            if attempt > MAX_REDRAWS {
                return Err(invalid("sigma", format!("no positive realization after {MAX_REDRAWS} redraws")));
            }
            discarded += 1;
            let seed = split_seed(origin, attempt);
            let draws = sample_truncated_normal(seed, basis.terms(), bound)?;
            *sample = sample_field(basis, sigma, &draws, seed)?;
        }
    }
    Ok(discarded)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub min: f64,
    pub max: f64,
    /// Samples whose total coefficient is nonpositive somewhere.
    pub flagged: Vec<usize>,
}

impl EllipticityReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(LrnsError::EllipticityViolated {
                samples: self.flagged,
                min: self.min,
            })
        }
    }
}

/// Extremes of `ā + ã` over all nodes and samples.
///
/// Coefficients are interpolated bilinearly between nodes, so nodal
/// positivity implies positivity everywhere.
pub fn check_ellipticity(mean: &[f64], samples: &[FieldSample]) -> EllipticityReport {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut flagged = Vec::new();
    let mut scan = |m: Option<usize>, values: &mut dyn Iterator<Item = f64>| {
        let mut bad = false;
        for v in values {
            min = min.min(v);
            max = max.max(v);
            bad |= !(v > 0.0);
        }
        if bad {
            flagged.push(m.unwrap_or(0));
        }
    };
    if samples.is_empty() {
        scan(None, &mut mean.iter().copied());
    }
    for (m, s) in samples.iter().enumerate() {
        scan(Some(m), &mut mean.iter().zip(&s.values).map(|(a, b)| a + b));
    }
    EllipticityReport { min, max, flagged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;
    use crate::linalg::jacobi_eigen;

    #[test]
    fn single_point() {
        let b = kl_decompose_points(&[[0.3, 0.4]], &CovarianceSpec::exponential(0.2), 1).unwrap();
        assert!((b.values[0] - 1.0).abs() < 1e-15);
        assert!((b.functions[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(matches!(
            kl_decompose_points(&[[0.3, 0.4]], &CovarianceSpec::exponential(0.2), 2),
            Err(LrnsError::InsufficientSpectrum { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn weighted_orthonormality_and_oracle_eigenvalues() {
        let mesh = build_mesh(8).unwrap();
        let cov = CovarianceSpec::exponential(0.2);
        let b = kl_decompose(&mesh, &cov, 19).unwrap();
        assert!(b.values.windows(2).all(|w| w[0] >= w[1] && w[1] > 0.0));
        let gram = b.functions.transpose_matmul(&b.functions).unwrap().scaled(b.weight);
        assert!(gram.sub(&DenseMatrix::identity(19)).max_abs() <= 1e-8);
        let p = mesh.num_nodes();
        let c = DenseMatrix::from_fn(p, p, |i, j| cov.eval(mesh.coords()[i], mesh.coords()[j]) / p as f64);
        let oracle = jacobi_eigen(&c).unwrap();
        for t in 0..19 {
            assert!((b.values[t] - oracle.values[t]).abs() <= 1e-10, "t={t}");
        }
    }

    #[test]
    fn truncated_draws_stay_in_bounds() {
        let d = sample_truncated_normal(5, 10_000, 3.0).unwrap();
        assert!(d.iter().all(|v| v.abs() <= 3.0));
        assert_eq!(d, sample_truncated_normal(5, 10_000, 3.0).unwrap());
        assert!(sample_truncated_normal(5, 1, 0.0).is_err());
    }

    #[test]
    fn truncated_variance_value() {
        // 1 − 6φ(3)/(2Φ(3) − 1) with tabulated φ(3), Φ(3).
        let phi3 = 0.004_431_848_411_938_008;
        let mass = 0.997_300_203_936_739_8;
        assert!((truncated_normal_variance(3.0) - (1.0 - 6.0 * phi3 / mass)).abs() < 1e-12);
    }

    #[test]
    fn field_examples() {
        let mesh = build_mesh(4).unwrap();
        let b = kl_decompose(&mesh, &CovarianceSpec::exponential(0.2), 3).unwrap();
        let zero = sample_field(&b, 0.0, &[1.0, -2.0, 0.5], 0).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let one = kl_decompose(&mesh, &CovarianceSpec::exponential(0.2), 1).unwrap();
        let s = sample_field(&one, 0.2, &[1.0], 0).unwrap();
        for i in 0..mesh.num_nodes() {
            assert!((s.values[i] - 0.2 * one.values[0].sqrt() * one.functions[(i, 0)]).abs() < 1e-15);
        }
        assert!(sample_field(&b, 1.5, &[0.0; 3], 0).is_err());
        assert!(sample_field(&b, 0.5, &[0.0; 2], 0).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let mesh = build_mesh(4).unwrap();
        let b = kl_decompose(&mesh, &CovarianceSpec::exponential(0.2), 5).unwrap();
        let a = sample_fields(&b, 0.3, 3.0, 99, 7).unwrap();
        let c = sample_fields(&b, 0.3, 3.0, 99, 7).unwrap();
        assert_eq!(a, c);
        assert_ne!(a[0].draws, a[1].draws);
    }

    #[test]
    fn ellipticity_examples() {
        let mean = vec![1.0; 4];
        let zero = FieldSample {
            seed: 0,
            draws: vec![],
            values: vec![0.0; 4],
        };
        let r = check_ellipticity(&mean, std::slice::from_ref(&zero));
        assert_eq!((r.min, r.max), (1.0, 1.0));
        assert!(r.passed());
        let bad = check_ellipticity(&[0.0; 4], &[zero]);
        assert_eq!(bad.flagged, vec![0]);
        assert!(bad.into_result().is_err());
    }

    #[test]
    fn resampling_replaces_only_nonpositive_fields() {
        let mesh = build_mesh(4).unwrap();
        let b = kl_decompose(&mesh, &CovarianceSpec::exponential(0.2), 5).unwrap();
        let mean = vec![0.4; mesh.num_nodes()];
        let original = sample_fields(&b, 1.0, 3.0, 7, 40).unwrap();
        let flagged = check_ellipticity(&mean, &original).flagged;
        assert!(!flagged.is_empty() && flagged.len() < 40);

        let mut fixed = original.clone();
        let redraws = resample_nonelliptic(&b, 1.0, 3.0, &mean, &mut fixed).unwrap();
        assert!(redraws >= flagged.len());
        assert!(check_ellipticity(&mean, &fixed).passed());
        for m in 0..40 {
            assert_eq!(fixed[m] == original[m], !flagged.contains(&m), "sample {m}");
        }
        let mut again = original.clone();
        assert_eq!(resample_nonelliptic(&b, 1.0, 3.0, &mean, &mut again).unwrap(), redraws);
        assert_eq!(again, fixed);
    }
}
