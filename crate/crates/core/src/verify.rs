//! Oracle checks.
//!
//! Every check measures the discrepancy between a library result and an
//! independent computation: direct solves, Jacobi eigenvalues, matrices
//! built from a known spectrum, central finite differences or quadrature.
//! A check passes when the measurement is finite and at most its tolerance.
//! Tolerances can be scaled or replaced by name, which is how tests confirm
//! that a tightened tolerance makes exactly the named check fail.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlConfig, ControlProblem, GradientMode, OptimizationTrace, Status};
use crate::diffusion::{
    lrns_run, qoi_error, scan_sigma, DiffusionConfig, DiffusionProblem, DiffusionSolver, RandomOperators,
    ReferenceSolver,
};
use crate::error::{invalid, Result};
use crate::experiment::{execute, ExperimentConfig, PipelineKind};
use crate::fem::{build_mesh, DofMap};
use crate::io::fmt_f64;
use crate::linalg::{
    factorize_spd, gaussian_matrix, jacobi_eigen, max_principal_angle_sin, norm2, orthonormalize, psd_with_spectrum,
    random_orthogonal, random_spd, range_basis, rsvd_top_eigvecs, symmetric_eigen, DenseMatrix, RsvdConfig,
};
use crate::lowrank::{
    compress_basis_rank, compress_with, gram_accumulate, rmsre, ExactFinder, LowRankFactors, MatrixCollection,
    RandomizedFinder,
};
use crate::neumann::build_operator;
use crate::parallel::with_threads;
use crate::randfield::{sample_truncated_normal, truncated_normal_variance, EllipticityPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteSize {
    /// Reduced meshes and sample counts, for a run of a few seconds.
    Quick,
    /// The full problem sizes.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub size: SuiteSize,
    /// Multiplies every default tolerance.
    pub tolerance_scale: f64,
    /// Replaces the tolerance of the named checks.
    pub tolerance_overrides: BTreeMap<String, f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            size: SuiteSize::Quick,
            tolerance_scale: 1.0,
            tolerance_overrides: BTreeMap::new(),
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_scale > 0.0 && self.tolerance_scale.is_finite()) {
            return Err(invalid("tolerance_scale", "must be positive"));
        }
        if let Some(name) = self.tolerance_overrides.keys().find(|n| !CHECK_NAMES.contains(&n.as_str())) {
            return Err(invalid("tolerance_overrides", format!("unknown check `{name}`")));
        }
        Ok(())
    }

    pub fn judge(&self, m: Measurement) -> Check {
        let tolerance = self
            .tolerance_overrides
            .get(m.name)
            .copied()
            .unwrap_or(m.tolerance * self.tolerance_scale);
        Check::new(m.name, m.value, tolerance, m.detail)
    }
}

/// A measured discrepancy with its default tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Measurement {
    fn new(name: &'static str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    /// Judged against the default tolerance.
    pub fn check(self) -> Check {
        Check::new(self.name, self.value, self.tolerance, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured.is_finite() && measured <= tolerance,
            detail,
        }
    }

    /// `PASS name: measured … (tolerance …) detail`.
    pub fn line(&self) -> String {
        format!(
            "{} {}: measured {:.4e} (tolerance {:.1e}){}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            if self.detail.is_empty() { "" } else { "; " },
            self.detail
        )
    }
}

pub fn write_checks_csv(checks: &[Check], out: &mut impl Write) -> Result<()> {
    writeln!(out, "name,measured,tolerance,passed")?;
    for c in checks {
        writeln!(out, "{},{},{},{}", c.name, fmt_f64(c.measured), fmt_f64(c.tolerance), c.passed)?;
    }
    Ok(())
}

/// Names of the checks run by [`run_suite`], in order.
pub const CHECK_NAMES: &[&str] = &[
    "mass-total",
    "kl-eigenvalues",
    "exact-limit-equivalence",
    "full-rank-reconstruction",
    "rmsre-tail-sum",
    "rsvd-subspace-angle",
    "rsvd-error-bound",
    "neumann-decay-rate",
    "tau-ordering-compressed",
    "tau-ordering-near-full",
    "sigma-trend",
    "neumann-truncation-gain",
    "control-gradient",
    "hessian-symmetry",
    "hessian-definite",
    "hessian-constancy",
    "control-monotone-descent",
    "optimizer-agreement",
    "truncated-normal-range",
    "truncated-normal-mean",
    "truncated-normal-variance",
    "determinism",
    "storage-accounting",
];

/// Runs every check at the configured size.
pub fn run_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    cfg.validate()?;
    let size = cfg.size;
    let mut m = vec![mass_total()?, kl_eigenvalues()?, exact_limit(size)?, full_rank_reconstruction(size)?];
    m.push(rmsre_tail_sum(size)?);
    m.push(rsvd_subspace_angle()?);
    m.push(rsvd_error_bound()?);
    m.push(neumann_decay_rate()?);
    m.extend(tau_ordering(size)?);
    m.extend(sigma_trend(size)?);
    m.push(control_gradient()?);
    m.extend(hessian_properties(size)?);
    let traces = control_runs(size)?;
    m.push(monotone_descent(&traces));
    m.push(optimizer_agreement(&traces));
    m.extend(truncated_normal(1_000_000)?);
    m.push(determinism(&[1, 2, 8])?);
    m.push(storage_accounting(size)?);
    debug_assert_eq!(m.iter().map(|x| x.name).collect::<Vec<_>>(), CHECK_NAMES);
    Ok(m.into_iter().map(|x| cfg.judge(x)).collect())
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(a.abs())
    }
}

/// The mass matrix integrates 1 over the unit square.
pub fn mass_total() -> Result<Measurement> {
    let mesh = build_mesh(8)?;
    let total = crate::fem::assemble_mass(&mesh).sum();
    Ok(Measurement::new("mass-total", (total - 1.0).abs(), 1e-13, format!("sum {total}")))
}

/// KL eigenvalues against Jacobi on the nodal covariance matrix.
pub fn kl_eigenvalues() -> Result<Measurement> {
    let mesh = build_mesh(8)?;
    let cov = crate::randfield::CovarianceSpec::exponential(0.2);
    let kl = crate::randfield::kl_decompose(&mesh, &cov, 19)?;
    let p = mesh.num_nodes();
    let c = DenseMatrix::from_fn(p, p, |i, j| cov.eval(mesh.coords()[i], mesh.coords()[j]) * kl.weight);
    let oracle = jacobi_eigen(&c)?;
    let worst = (0..19)
        .map(|t| relative(kl.values[t], oracle.values[t]))
        .fold(0.0, f64::max);
    Ok(Measurement::new("kl-eigenvalues", worst, 1e-10, "19 terms, 81 nodes"))
}

fn small_diffusion(samples: usize, steps: usize, sigma: f64) -> DiffusionConfig {
    DiffusionConfig {
        cells: 8,
        samples,
        steps,
        sigma,
        ..DiffusionConfig::default()
    }
}

/// LRNS at τ = 1 and R = 30 against direct Monte-Carlo solves.
pub fn exact_limit(size: SuiteSize) -> Result<Measurement> {
    let (samples, steps) = match size {
        SuiteSize::Quick => (20, 5),
        SuiteSize::Full => (100, 20),
    };
    let cfg = DiffusionConfig {
        tau: 1.0,
        neumann_terms: 30,
        ..small_diffusion(samples, steps, 0.1)
    };
    let problem = DiffusionProblem::build(&cfg)?;
    let reference = ReferenceSolver.solve(&problem)?.trajectory;
    let lrns = lrns_run(&problem, 1.0, 30)?.trajectory;
    let err = qoi_error(&lrns, &reference, &problem.mass, problem.dt())?;
    Ok(Measurement::new(
        "exact-limit-equivalence",
        err,
        1e-6,
        format!("n=8 M={samples} L={steps} sigma=0.1 R=30"),
    ))
}

fn perturbation_collection(samples: usize) -> Result<Arc<MatrixCollection>> {
    let cfg = small_diffusion(samples, 1, 0.2);
    let mesh = build_mesh(cfg.cells)?;
    let dofs = DofMap::new(&mesh);
    Ok(RandomOperators::build(&cfg, &mesh, &dofs, false)?.perturbations)
}

fn collection_samples(size: SuiteSize) -> usize {
    match size {
        SuiteSize::Quick => 30,
        SuiteSize::Full => 100,
    }
}

/// RMSRE of a τ = 1 compression relative to the collection scale.
pub fn full_rank_reconstruction(size: SuiteSize) -> Result<Measurement> {
    let coll = perturbation_collection(collection_samples(size))?;
    let sketch = RsvdConfig::with_defaults(1, coll.dim(), 11);
    let factors = compress_with(&coll, 1.0, &sketch, &RandomizedFinder)?;
    let rel = rmsre(&factors, &coll)? / coll.frobenius_scale();
    Ok(Measurement::new(
        "full-rank-reconstruction",
        rel,
        1e-9,
        format!("N={} M={}", coll.dim(), coll.len()),
    ))
}

/// `M·RMSRE²` against the Gram eigenvalue tail from Jacobi, for exact bases.
pub fn rmsre_tail_sum(size: SuiteSize) -> Result<Measurement> {
    let coll = perturbation_collection(collection_samples(size))?;
    let eig = jacobi_eigen(&gram_accumulate(&coll))?;
    let sketch = RsvdConfig::plain(1, 0);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for k in [5, 15, 30] {
        let basis = compress_basis_rank(&coll, k, &sketch, &ExactFinder)?;
        let factors = LowRankFactors::from_basis(basis, &coll, k as f64 / coll.dim() as f64)?;
        let lhs = coll.len() as f64 * rmsre(&factors, &coll)?.powi(2);
        let tail: f64 = eig.values[k..].iter().sum();
        worst = worst.max(relative(lhs, tail));
        detail.push(format!("k={k}: {lhs:.6e} vs {tail:.6e}"));
    }
    Ok(Measurement::new("rmsre-tail-sum", worst, 1e-8, detail.join(", ")))
}

/// Ten eigenvalues in `[0.55, 1]` above a geometric tail starting at 0.05,
/// a gap ratio of 11. The subspace error scales like `(λ_{k+p+1}/λ_k)^{2q+1}`,
/// so the tail has to fall off as well: with a tail decaying by 0.97 per
/// index the angle is about 2e-6.
fn gapped_spectrum(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i < 10 {
                1.0 - 0.05 * i as f64
            } else {
                0.05 * 0.5f64.powi(i as i32 - 10)
            }
        })
        .collect()
}

/// Randomized top-10 subspace of a 200×200 matrix with a spectral gap of 10
/// against the known eigenvectors.
pub fn rsvd_subspace_angle() -> Result<Measurement> {
    let spectrum = gapped_spectrum(200);
    let seed = 71;
    let s = psd_with_spectrum(&spectrum, seed);
    let exact = random_orthogonal(200, seed).leading_columns(10);
    let cfg = RsvdConfig {
        rank: 10,
        oversampling: 10,
        power_iterations: 2,
        seed: 5,
    };
    let q = rsvd_top_eigvecs(&s, &cfg)?;
    let sin = max_principal_angle_sin(&exact, &q);
    Ok(Measurement::new("rsvd-subspace-angle", sin, 1e-6, "n=200 k=10 p=10 q=2, gap 10"))
}

/// Mean plain-sketch residual over 20 seeds relative to `√(1+k)` times the
/// root of the squared singular-value tail.
pub fn rsvd_error_bound() -> Result<Measurement> {
    let n = 200;
    let k = 10;
    let spectrum: Vec<f64> = (0..n).map(|i| 0.9f64.powi(i)).collect();
    let s = psd_with_spectrum(&spectrum, 72);
    let tail: f64 = spectrum[k..].iter().map(|l| l * l).sum();
    let bound = ((1 + k) as f64).sqrt() * tail.sqrt();
    let mut total = 0.0;
    for seed in 0..20 {
        let q = range_basis(&s, &RsvdConfig::plain(k, 1000 + seed))?;
        let mut residual = s.clone();
        residual.add_scaled(-1.0, &q.matmul(&q.transpose_matmul(&s)?)?);
        total += residual.frobenius_norm();
    }
    let mean = total / 20.0;
    Ok(Measurement::new(
        "rsvd-error-bound",
        mean / bound,
        1.0,
        format!("mean residual {mean:.4e}, bound {bound:.4e}"),
    ))
}

/// Slope of `log error` against `R` for a 30×30 system whose iteration
/// matrix has spectral radius 0.5, relative to `log 0.5`.
pub fn neumann_decay_rate() -> Result<Measurement> {
    let n = 30;
    let rho = 0.5;
    let mean = random_spd(n, 81);
    let eig = symmetric_eigen(&mean)?;
    let root = DenseMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|t| eig.vectors[(i, t)] * eig.values[t].sqrt() * eig.vectors[(j, t)]).sum()
    });
    // Ā^{1/2} U D Uᵀ Ā^{1/2}: the iteration matrix is similar to U D Uᵀ.
    let u = random_orthogonal(n, 82).leading_columns(3);
    let d = [rho, -0.3, 0.2];
    let au = root.matmul(&u)?;
    let perturbation = DenseMatrix::from_fn(n, n, |i, j| (0..3).map(|t| au[(i, t)] * d[t] * au[(j, t)]).sum());
    let basis = orthonormalize(&au)?;
    let factors = LowRankFactors {
        factors: vec![perturbation.transpose_matmul(&basis)?],
        basis,
        tau: 1.0,
        rank: 3,
    };
    let op = build_operator(&mean, factors, 0, 1.0)?;
    let mut full = mean.clone();
    full.add_scaled(1.0, &perturbation);
    let b = gaussian_matrix(n, 1, 83).into_vec();
    let exact = factorize_spd(&full)?.solve(&b);
    let points: Vec<(f64, f64)> = (0..=12)
        .map(|r| {
            let x = op.with_terms(r).apply_inverse(0, &b);
            let e: Vec<f64> = x.iter().zip(&exact).map(|(p, q)| p - q).collect();
            (r as f64, (norm2(&e) / norm2(&exact)).ln())
        })
        .collect();
    let np = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / np;
    let my = points.iter().map(|p| p.1).sum::<f64>() / np;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Ok(Measurement::new(
        "neumann-decay-rate",
        (slope - rho.ln()).abs() / rho.ln().abs(),
        0.1,
        format!("slope {slope:.4}, log rho {:.4}", rho.ln()),
    ))
}

/// Errors at τ ∈ {0.10, 0.88, 1.0}; the measurements are
/// `10·err(0.88)/err(0.10)` and `err(0.88)/(2·err(1.0))`.
pub fn tau_ordering(size: SuiteSize) -> Result<Vec<Measurement>> {
    let cfg = match size {
        SuiteSize::Quick => small_diffusion(40, 20, 0.2),
        SuiteSize::Full => DiffusionConfig {
            cells: 16,
            samples: 200,
            ..DiffusionConfig::default()
        },
    };
    let problem = DiffusionProblem::build(&cfg)?;
    let reference = ReferenceSolver.solve(&problem)?.trajectory;
    let rows = crate::diffusion::scan_tau(&problem, &reference, &[0.10, 0.88, 1.0])?;
    let (low, mid, full) = (rows[0].error, rows[1].error, rows[2].error);
    let detail = format!(
        "n={} M={}: err(0.10)={low:.4e} err(0.88)={mid:.4e} err(1.0)={full:.4e}",
        cfg.cells, cfg.samples
    );
    Ok(vec![
        Measurement::new("tau-ordering-compressed", 10.0 * mid / low, 1.0, detail.clone()),
        Measurement::new("tau-ordering-near-full", mid / (2.0 * full), 1.0, detail),
    ])
}

/// Errors over σ ∈ {0.1, 0.2, 0.5} and R ∈ {0, 5, 15}. Nonpositive
/// realizations are redrawn. The measurements are the largest ratio of
/// consecutive R = 5 errors and `err(R=15)/err(R=0)` at σ = 0.1.
pub fn sigma_trend(size: SuiteSize) -> Result<Vec<Measurement>> {
    let cfg = DiffusionConfig {
        ellipticity: EllipticityPolicy::Resample,
        ..match size {
            SuiteSize::Quick => small_diffusion(30, 20, 0.2),
            SuiteSize::Full => DiffusionConfig {
                cells: 16,
                samples: 100,
                ..DiffusionConfig::default()
            },
        }
    };
    let rows = scan_sigma(&cfg, &[0.1, 0.2, 0.5], &[0, 5, 15])?;
    let at = |s: f64, r: usize| {
        rows.iter()
            .find(|x| x.sigma == s && x.terms == r)
            .map(|x| x.error)
            .expect("grid point present")
    };
    let r5 = [at(0.1, 5), at(0.2, 5), at(0.5, 5)];
    let worst = r5.windows(2).map(|w| w[0] / w[1]).fold(0.0, f64::max);
    let rho: Vec<String> = rows
        .iter()
        .filter(|x| x.terms == 5)
        .map(|x| format!("{:.3}", x.rho_max))
        .collect();
    Ok(vec![
        Measurement::new(
            "sigma-trend",
            worst,
            1.0,
            format!("R=5 errors {:.3e} {:.3e} {:.3e}; rho_max {}", r5[0], r5[1], r5[2], rho.join(" ")),
        ),
        Measurement::new(
            "neumann-truncation-gain",
            at(0.1, 15) / at(0.1, 0),
            0.1,
            format!("sigma=0.1: err(R=0)={:.3e} err(R=15)={:.3e}", at(0.1, 0), at(0.1, 15)),
        ),
    ])
}

fn control_config(cells: usize, samples: usize, steps: usize) -> ControlConfig {
    let base = ControlConfig::default();
    ControlConfig {
        problem: DiffusionConfig {
            cells,
            samples,
            steps,
            ..base.problem.clone()
        },
        ..base
    }
}

/// Largest relative difference between the gradient and central differences
/// (step 1e-6) of the frozen-state surrogate on a 4×4 mesh. Components are
/// compared relative to `max(|g_i|, 1e-3 ‖g‖_∞)`.
pub fn control_gradient() -> Result<Measurement> {
    let cfg = ControlConfig {
        gradient_mode: GradientMode::FrozenState,
        ..control_config(4, 20, 5)
    };
    let p = ControlProblem::build(&cfg)?;
    let mut g = crate::rng::Gaussian::new(91);
    let f: Vec<Vec<f64>> = (0..p.steps())
        .map(|_| (0..p.dim()).map(|_| g.next()).collect())
        .collect();
    let eval = p.evaluate(&f)?;
    let scale = eval.gradient.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for l in 0..p.steps() {
        for i in 0..p.dim() {
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus[l][i] += h;
            minus[l][i] -= h;
            let fd = (p.surrogate_objective(&f, &plus)? - p.surrogate_objective(&f, &minus)?) / (2.0 * h);
            let gi = eval.gradient[l][i];
            worst = worst.max((fd - gi).abs() / gi.abs().max(1e-3 * scale));
        }
    }
    Ok(Measurement::new(
        "control-gradient",
        worst,
        1e-6,
        format!("n=4 M=20 L=5, {} components", p.steps() * p.dim()),
    ))
}

/// Relative asymmetry, Cholesky failure (0 or 1) and the number of entries
/// that differ after a rebuild at a different control.
pub fn hessian_properties(size: SuiteSize) -> Result<Vec<Measurement>> {
    let cfg = match size {
        SuiteSize::Quick => control_config(4, 20, 5),
        SuiteSize::Full => control_config(8, 40, 20),
    };
    let p = ControlProblem::build(&cfg)?;
    let h0 = p.hessian()?;
    // Moving the control does not enter the Hessian; evaluate in between to
    // make sure no state is cached.
    let f: Vec<Vec<f64>> = vec![vec![0.5; p.dim()]; p.steps()];
    p.evaluate(&f)?;
    let h1 = p.hessian()?;
    let differing = h0
        .matrix
        .as_slice()
        .iter()
        .zip(h1.matrix.as_slice())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    let definite = factorize_spd(&h0.matrix).is_ok();
    let detail = format!("n={} M={}, dimension {}", cfg.problem.cells, cfg.problem.samples, p.dim());
    Ok(vec![
        Measurement::new(
            "hessian-symmetry",
            h0.raw_asymmetry / h0.matrix.max_abs(),
            1e-10,
            detail.clone(),
        ),
        Measurement::new("hessian-definite", if definite { 0.0 } else { 1.0 }, 0.0, detail.clone()),
        Measurement::new("hessian-constancy", differing as f64, 0.0, detail),
    ])
}

/// Newton, steepest descent and SGD from zero on the desk-scale problem
/// (`n = 16`, `M = 100`) or a reduced one.
pub fn control_runs(size: SuiteSize) -> Result<Vec<OptimizationTrace>> {
    let base = match size {
        SuiteSize::Quick => control_config(8, 20, 20),
        SuiteSize::Full => control_config(16, 100, 100),
    };
    let problem = ControlProblem::build(&base)?;
    ["newton", "steepest", "sgd"]
        .iter()
        .map(|name| {
            let opt = crate::control::optimizers().get(name)?;
            opt.run(&problem, problem.zero_control())
        })
        .collect()
}

/// Accepted Newton and steepest-descent steps whose surrogate value did not
/// decrease, plus runs that did not converge.
pub fn monotone_descent(traces: &[OptimizationTrace]) -> Measurement {
    let line_search: Vec<&OptimizationTrace> = traces.iter().filter(|t| t.optimizer != "sgd").collect();
    let bad: usize = line_search
        .iter()
        .map(|t| t.model_increases() + usize::from(t.status != Status::Converged))
        .sum();
    let detail = line_search
        .iter()
        .map(|t| format!("{} {:?} in {} iterations", t.optimizer, t.status, t.iterations))
        .collect::<Vec<_>>()
        .join(", ");
    Measurement::new("control-monotone-descent", bad as f64, 0.0, detail)
}

/// `(max − min) / min` over the final objectives.
pub fn optimizer_agreement(traces: &[OptimizationTrace]) -> Measurement {
    let values: Vec<f64> = traces.iter().map(|t| t.final_objective).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let detail = traces
        .iter()
        .map(|t| format!("{} {:.6e}", t.optimizer, t.final_objective))
        .collect::<Vec<_>>()
        .join(", ");
    Measurement::new("optimizer-agreement", (hi - lo) / lo, 0.05, detail)
}

/// Final over initial objective of the Newton run.
pub fn objective_ratio(traces: &[OptimizationTrace]) -> Measurement {
    let newton = traces.iter().find(|t| t.optimizer == "newton").expect("newton run present");
    Measurement::new(
        "control-objective-ratio",
        newton.ratio(),
        0.10,
        format!(
            "J0={:.6e} J*={:.6e} after {} iterations",
            newton.initial_objective, newton.final_objective, newton.iterations
        ),
    )
}

/// Draws outside `[−3, 3]`, `|mean|` and the variance error against
/// quadrature.
pub fn truncated_normal(count: usize) -> Result<Vec<Measurement>> {
    let draws = sample_truncated_normal(2024, count, 3.0)?;
    let outside = draws.iter().filter(|v| v.abs() > 3.0).count();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let oracle = truncated_normal_variance(3.0);
    let detail = format!("{count} draws, variance {var:.5} vs {oracle:.5}");
    Ok(vec![
        Measurement::new("truncated-normal-range", outside as f64, 0.0, detail.clone()),
        Measurement::new("truncated-normal-mean", mean.abs(), 0.005, detail.clone()),
        Measurement::new("truncated-normal-variance", (var - oracle).abs(), 0.01, detail),
    ])
}

/// Small configurations of every numeric pipeline.
pub fn determinism_configs() -> Vec<ExperimentConfig> {
    let diffusion = DiffusionConfig {
        cells: 6,
        samples: 12,
        steps: 6,
        kl_terms: 8,
        ..DiffusionConfig::default()
    };
    let mut out = Vec::new();
    for kind in [
        PipelineKind::SolveDiffusion,
        PipelineKind::Compress,
        PipelineKind::ScanTau,
        PipelineKind::ScanSigma,
    ] {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.diffusion = DiffusionConfig {
            ellipticity: EllipticityPolicy::Resample,
            ..diffusion.clone()
        };
        cfg.scan.taus = vec![0.3, 1.0];
        out.push(cfg);
    }
    for optimizer in ["newton", "sgd"] {
        let mut cfg = ExperimentConfig::new(PipelineKind::SolveControl);
        cfg.control = ControlConfig {
            optimizer: optimizer.into(),
            ..control_config(4, 40, 5)
        };
        out.push(cfg);
    }
    out
}

/// Artifacts that differ from the single-thread run at any of `threads`.
pub fn determinism(threads: &[usize]) -> Result<Measurement> {
    let configs = determinism_configs();
    let mut differing = 0usize;
    let mut compared = 0usize;
    for cfg in &configs {
        let runs = threads
            .iter()
            .map(|&t| with_threads(t, || execute(cfg))?)
            .collect::<Result<Vec<_>>>()?;
        for run in &runs[1..] {
            for (a, b) in runs[0].artifacts.iter().zip(&run.artifacts) {
                compared += 1;
                if a != b {
                    differing += 1;
                }
            }
            differing += runs[0].artifacts.len().abs_diff(run.artifacts.len());
        }
    }
    Ok(Measurement::new(
        "determinism",
        differing as f64,
        0.0,
        format!("{} pipelines, {compared} artifact comparisons at threads {threads:?}", configs.len()),
    ))
}

/// `|floats stored − (M+1)·N·k|` for a compression at τ = 0.5.
pub fn storage_accounting(size: SuiteSize) -> Result<Measurement> {
    let coll = perturbation_collection(collection_samples(size))?;
    let sketch = RsvdConfig::with_defaults(1, coll.dim(), 13);
    let factors = compress_with(&coll, 0.5, &sketch, &RandomizedFinder)?;
    let (m, n, k) = (coll.len(), coll.dim(), factors.rank);
    let expected = (m + 1) * n * k;
    Ok(Measurement::new(
        "storage-accounting",
        factors.storage_floats().abs_diff(expected) as f64,
        0.0,
        format!("M={m} N={n} k={k}: {} floats", factors.storage_floats()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judging_applies_scale_and_overrides() {
        let m = Measurement::new("rsvd-error-bound", 0.5, 1.0, "");
        assert!(VerifyConfig::default().judge(m.clone()).passed);
        let scaled = VerifyConfig {
            tolerance_scale: 0.1,
            ..VerifyConfig::default()
        };
        assert!(!scaled.judge(m.clone()).passed);
        let overridden = VerifyConfig {
            tolerance_overrides: BTreeMap::from([("rsvd-error-bound".to_string(), 0.4)]),
            ..VerifyConfig::default()
        };
        let c = overridden.judge(m);
        assert!(!c.passed);
        assert!(c.line().starts_with("FAIL rsvd-error-bound"));
        assert!(!Check::new("x", f64::NAN, 1.0, String::new()).passed);
    }

    #[test]
    fn unknown_override_is_rejected() {
        let cfg = VerifyConfig {
            tolerance_overrides: BTreeMap::from([("nope".to_string(), 1.0)]),
            ..VerifyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cheap_oracles_pass() {
        for m in [mass_total().unwrap(), kl_eigenvalues().unwrap(), neumann_decay_rate().unwrap()] {
            let c = m.check();
            assert!(c.passed, "{}", c.line());
        }
    }
}
