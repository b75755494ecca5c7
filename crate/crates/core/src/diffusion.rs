//! Unsteady diffusion with a random permeability `a = ā + ã(x, ω)`.
//!
//! Bilinear elements in space and Crank–Nicolson in time. With
//! `K̄ = (2/Δt) G + Ā` each step solves
//! `(K̄ + K̃_m) u_{l+½} = ½(b_{l+1} + b_l) + (2/Δt) G u_l` on the interior
//! nodes and sets `u_{l+1} = 2 u_{l+½} − u_l`. Dirichlet data `g` enter
//! through the usual lifting of the interior–boundary blocks.
//!
//! Two solvers share the marching code: `reference` factorizes every
//! `K̄ + K̃_m` once, `lrns` replaces the direct solves by the truncated
//! Neumann series around `K̄` with a shared low-rank basis of `{K̃_m}`.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LrnsError, Result};
use crate::fem::{assemble_load, assemble_mass, assemble_stiffness, build_mesh, Coefficient, DofMap, StructuredMesh};
use crate::functions::builtin_functions;
use crate::io::fmt_f64;
use crate::linalg::{axpy, dot, factorize_spd_csr, CsrMatrix, RsvdConfig, SymmetricFactorization};
use crate::lowrank::{basis_finders, compress_basis_rank, rank_for, MatrixCollection};
use crate::neumann::{NeumannOperator, SampleFactors, SolveReport};
use crate::parallel::ordered_fold;
use crate::randfield::{
    check_ellipticity, kl_decompose, resample_nonelliptic, sample_fields, CovarianceSpec, EllipticityPolicy, EllipticityReport,
    FieldSample, KLBasis, Kernel,
};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Cells per side of the unit square.
    pub cells: usize,
    pub final_time: f64,
    /// Time steps `L`; `Δt = final_time / steps`.
    pub steps: usize,
    /// Monte-Carlo samples `M`.
    pub samples: usize,
    /// Perturbation scale σ.
    pub sigma: f64,
    /// KL truncation `T`.
    pub kl_terms: usize,
    pub correlation_length: f64,
    pub kernel: Kernel,
    /// Draws are truncated to `[−bound, bound]`.
    pub truncation_bound: f64,
    /// Constant mean permeability `ā`.
    pub mean_coefficient: f64,
    /// Neumann truncation index `R`.
    pub neumann_terms: usize,
    /// Compression ratio τ.
    pub tau: f64,
    pub seed: u64,
    /// Registry names of `f`, `g` and `u₀`.
    pub source: String,
    pub boundary: String,
    pub initial: String,
    pub basis_finder: String,
    pub oversampling: usize,
    pub power_iterations: usize,
    /// Neumann guard threshold.
    pub guard: f64,
    /// What to do with realizations whose permeability is not positive.
    pub ellipticity: EllipticityPolicy,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            cells: 32,
            final_time: 1.0,
            steps: 100,
            samples: 1000,
            sigma: 0.2,
            kl_terms: 19,
            correlation_length: 0.2,
            kernel: Kernel::Exponential,
            truncation_bound: 3.0,
            mean_coefficient: 1.0,
            neumann_terms: 5,
            tau: 0.88,
            seed: 20_240_601,
            source: "one".into(),
            boundary: "zero".into(),
            initial: "sin2pix-sin2piy".into(),
            basis_finder: "rsvd".into(),
            oversampling: 10,
            power_iterations: 1,
            guard: crate::neumann::DEFAULT_GUARD,
            ellipticity: EllipticityPolicy::Reject,
        }
    }
}

impl DiffusionConfig {
    pub fn dt(&self) -> f64 {
        self.final_time / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(invalid("cells", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if !(self.final_time > 0.0 && self.final_time.is_finite()) {
            return Err(invalid("final_time", "must be positive"));
        }
        if self.samples == 0 {
            return Err(invalid("samples", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(invalid("sigma", format!("must lie in [0, 1], got {}", self.sigma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.guard > 0.0 && self.guard <= 1.0) {
            return Err(invalid("guard", format!("must lie in (0, 1], got {}", self.guard)));
        }
        if !(self.mean_coefficient > 0.0) {
            return Err(invalid("mean_coefficient", "must be positive"));
        }
        let functions = builtin_functions();
        for (field, name) in [("source", &self.source), ("boundary", &self.boundary), ("initial", &self.initial)] {
            functions.get(name).map_err(|e| e.at(field))?;
        }
        basis_finders().get(&self.basis_finder).map_err(|e| e.at("basis_finder"))?;
        Ok(())
    }

    pub fn sketch(&self) -> RsvdConfig {
        RsvdConfig {
            rank: 1,
            oversampling: self.oversampling,
            power_iterations: self.power_iterations,
            seed: crate::rng::split_seed(self.seed, u64::MAX),
        }
    }
}

/// Permeability samples and the interior blocks of their stiffness matrices.
pub struct RandomOperators {
    pub kl: KLBasis,
    pub fields: Vec<FieldSample>,
    pub ellipticity: EllipticityReport,
    /// Realizations replaced under [`EllipticityPolicy::Resample`].
    pub redraws: usize,
    /// Interior blocks `K̃_m`.
    pub perturbations: Arc<MatrixCollection>,
    /// Interior–boundary blocks, when requested.
    pub coupling: Option<Vec<CsrMatrix>>,
}

impl RandomOperators {
    /// Draws the fields, rejects non-elliptic samples and assembles `K̃_m`.
    pub fn build(config: &DiffusionConfig, mesh: &StructuredMesh, dofs: &DofMap, with_coupling: bool) -> Result<Self> {
        let cov = CovarianceSpec {
            correlation_length: config.correlation_length,
            kernel: config.kernel,
        };
        let kl = kl_decompose(mesh, &cov, config.kl_terms)?;
        let mut fields = sample_fields(&kl, config.sigma, config.truncation_bound, config.seed, config.samples)?;
        let mean_nodal = vec![config.mean_coefficient; mesh.num_nodes()];
        let redraws = match config.ellipticity {
            EllipticityPolicy::Reject => 0,
            EllipticityPolicy::Resample => {
                resample_nonelliptic(&kl, config.sigma, config.truncation_bound, &mean_nodal, &mut fields)?
            }
        };
        let ellipticity = check_ellipticity(&mean_nodal, &fields).into_result()?;

        let assembled: Vec<(CsrMatrix, Option<CsrMatrix>)> = crate::parallel::ordered_map(fields.len(), |m| {
            let full = assemble_stiffness(mesh, Coefficient::Nodal(&fields[m].values))?;
            let coupling = if with_coupling { Some(dofs.coupling(&full)?) } else { None };
            Ok((dofs.restrict_matrix(&full)?, coupling))
        })?;
        let (blocks, couplings): (Vec<_>, Vec<_>) = assembled.into_iter().unzip();
        let coupling = if with_coupling {
            Some(couplings.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(Self {
            kl,
            fields,
            ellipticity,
            redraws,
            perturbations: Arc::new(MatrixCollection::new(blocks)?),
            coupling,
        })
    }
}

/// Rank `k = ⌈τN⌉` over all `N` mesh nodes and the basis width it leaves
/// for the interior blocks. Dirichlet rows and columns of `K̃_m` vanish, so
/// the Gram accumulation over all nodes has one null direction per boundary
/// node and directions beyond the interior count carry no energy.
pub fn compression_rank(tau: f64, nodes: usize, interior: usize) -> Result<(usize, usize)> {
    let k = rank_for(tau, nodes)?;
    Ok((k, k.min(interior)))
}

/// Compresses `perturbations` at ratio `tau` over `nodes` mesh nodes and
/// wraps the factorized mean matrix in a guarded Neumann operator with
/// implicit sample factors.
pub fn neumann_around(
    config: &DiffusionConfig,
    mean: &Arc<SymmetricFactorization>,
    perturbations: &Arc<MatrixCollection>,
    nodes: usize,
    tau: f64,
    terms: usize,
) -> Result<(NeumannOperator, SolveReport)> {
    let finder = basis_finders().get(&config.basis_finder)?;
    let (_, width) = compression_rank(tau, nodes, perturbations.dim())?;
    let basis = compress_basis_rank(perturbations, width, &config.sketch(), finder.as_ref())?;
    let op = NeumannOperator::new(
        Arc::clone(mean),
        &basis,
        SampleFactors::Implicit {
            basis: basis.clone(),
            members: Arc::clone(perturbations),
        },
        terms,
        config.guard,
    )?;
    let report = op.guard_all()?;
    Ok((op, report))
}

/// Crank–Nicolson interior operators.
#[derive(Clone, Debug)]
pub struct CrankNicolsonSystem {
    /// `K̄ = (2/Δt) G + Ā`.
    pub k_bar: CsrMatrix,
    pub mass: CsrMatrix,
    pub dt: f64,
    pub factorization: Arc<SymmetricFactorization>,
}

/// Forms and factorizes `K̄ = (2/Δt) G + Ā`.
pub fn assemble_cn(mass: &CsrMatrix, stiffness: &CsrMatrix, dt: f64) -> Result<CrankNicolsonSystem> {
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    let k_bar = mass.linear_combination(2.0 / dt, stiffness, 1.0)?;
    let factorization = Arc::new(factorize_spd_csr(&k_bar)?);
    Ok(CrankNicolsonSystem {
        k_bar,
        mass: mass.clone(),
        dt,
        factorization,
    })
}

/// Everything both solvers need: mesh, operators, samples and loads.
pub struct DiffusionProblem {
    pub config: DiffusionConfig,
    pub mesh: StructuredMesh,
    pub dofs: DofMap,
    /// Full mass matrix, used by the error metric.
    pub mass: CsrMatrix,
    pub system: CrankNicolsonSystem,
    pub kl: KLBasis,
    pub fields: Vec<FieldSample>,
    pub ellipticity: EllipticityReport,
    pub redraws: usize,
    /// Interior blocks `K̃_m`.
    pub perturbations: Arc<MatrixCollection>,
    /// Interior–boundary blocks of `K̃_m`; present only for nonzero `g`.
    coupling: Option<Vec<CsrMatrix>>,
    /// Right-hand side without the sample-dependent terms, one per step.
    common: Vec<Vec<f64>>,
    /// Boundary values `g(t_l)` for `l = 0..=L`; empty for zero data.
    boundary: Vec<Vec<f64>>,
    /// Nodal `u₀`.
    pub initial: Vec<f64>,
    initial_interior: Vec<f64>,
}

impl DiffusionProblem {
    pub fn build(config: &DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let functions = builtin_functions();
        let source = functions.get(&config.source)?;
        let boundary_fn = functions.get(&config.boundary)?;
        let initial_fn = functions.get(&config.initial)?;

        let mesh = build_mesh(config.cells)?;
        let dofs = DofMap::new(&mesh);
        let dt = config.dt();
        let mass = assemble_mass(&mesh);
        let mean = assemble_stiffness(&mesh, Coefficient::Constant(config.mean_coefficient))?;
        let system = assemble_cn(&dofs.restrict_matrix(&mass)?, &dofs.restrict_matrix(&mean)?, dt)?;

        let with_boundary = !boundary_fn.is_zero();
        let random = RandomOperators::build(config, &mesh, &dofs, with_boundary)?;
        let RandomOperators {
            kl,
            fields,
            ellipticity,
            redraws,
            perturbations,
            coupling,
        } = random;

        let times: Vec<f64> = (0..=config.steps).map(|l| l as f64 * dt).collect();
        let load_at = |t: f64| dofs.restrict_vector(&assemble_load(&mesh, |x, y| source.eval(x, y, t)));
        let loads: Vec<Vec<f64>> = if source.time_dependent() {
            times.iter().map(|&t| load_at(t)).collect::<Result<_>>()?
        } else {
            vec![load_at(0.0)?]
        };
        let load = |l: usize| &loads[l.min(loads.len() - 1)];

        let boundary: Vec<Vec<f64>> = if with_boundary {
            times
                .iter()
                .map(|&t| dofs.boundary_values(&mesh.interpolate(|x, y| boundary_fn.eval(x, y, t))))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mass_ib = dofs.coupling(&mass)?;
        let mean_ib = dofs.coupling(&mean)?;
        let mut common = Vec::with_capacity(config.steps);
        for l in 0..config.steps {
            let mut c: Vec<f64> = load(l).iter().zip(load(l + 1)).map(|(a, b)| 0.5 * (a + b)).collect();
            if with_boundary {
                let half: Vec<f64> = boundary[l].iter().zip(&boundary[l + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
                mass_ib.matvec_add(2.0 / dt, &boundary[l], &mut c);
                mass_ib.matvec_add(-2.0 / dt, &half, &mut c);
                mean_ib.matvec_add(-1.0, &half, &mut c);
            }
            common.push(c);
        }

        let initial = mesh.interpolate(|x, y| initial_fn.eval(x, y, 0.0));
        let initial_interior = dofs.restrict_vector(&initial)?;
        Ok(Self {
            config: config.clone(),
            mesh,
            dofs,
            mass,
            system,
            kl,
            fields,
            ellipticity,
            redraws,
            perturbations,
            coupling,
            common,
            boundary,
            initial,
            initial_interior,
        })
    }

    pub fn dt(&self) -> f64 {
        self.system.dt
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn samples(&self) -> usize {
        self.perturbations.len()
    }

    pub fn num_interior(&self) -> usize {
        self.dofs.num_interior()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|l| l as f64 * self.dt()).collect()
    }

    /// Interior states `u_{m,0..=L}` of sample `m`, with `solve` applying
    /// (an approximation of) `(K̄ + K̃_m)⁻¹`.
    pub fn march(&self, m: usize, solve: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
        let dt = self.dt();
        let mut states = Vec::with_capacity(self.steps() + 1);
        states.push(self.initial_interior.clone());
        for l in 0..self.steps() {
            let u = &states[l];
            let mut rhs = self.common[l].clone();
            self.system.mass.matvec_add(2.0 / dt, u, &mut rhs);
            if let Some(coupling) = &self.coupling {
                let half: Vec<f64> = self.boundary[l]
                    .iter()
                    .zip(&self.boundary[l + 1])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                coupling[m].matvec_add(-1.0, &half, &mut rhs);
            }
            let mid = solve(&rhs);
            let next = mid.iter().zip(u).map(|(h, p)| 2.0 * h - p).collect();
            states.push(next);
        }
        states
    }

    /// Sample mean of interior trajectories, extended to nodal fields.
    pub fn mean_trajectory(
        &self,
        solver: &str,
        sample_states: impl Fn(usize) -> Result<Vec<Vec<f64>>> + Sync + Send,
    ) -> Result<QoITrajectory> {
        let n = self.num_interior();
        let steps = self.steps();
        let sum = ordered_fold(
            self.samples(),
            sample_states,
            vec![vec![0.0; n]; steps],
            |mut acc, _, states| {
                for (a, u) in acc.iter_mut().zip(&states[1..]) {
                    axpy(a, 1.0, u);
                }
                acc
            },
        )?;
        let scale = 1.0 / self.samples() as f64;
        let zero_boundary = vec![0.0; self.dofs.boundary().len()];
        let mut fields = Vec::with_capacity(steps + 1);
        fields.push(self.initial.clone());
        for (l, s) in sum.into_iter().enumerate() {
            let interior: Vec<f64> = s.into_iter().map(|v| v * scale).collect();
            let g = self.boundary.get(l + 1).unwrap_or(&zero_boundary);
            fields.push(self.dofs.extend(&interior, g));
        }
        Ok(QoITrajectory {
            solver: solver.to_string(),
            config_hash: crate::experiment::config_hash(&self.config),
            times: self.times(),
            fields,
        })
    }

    /// Factorization of `K̄ + K̃_m`.
    pub fn sample_factorization(&self, m: usize) -> Result<SymmetricFactorization> {
        let k = self.system.k_bar.linear_combination(1.0, self.perturbations.member(m), 1.0)?;
        factorize_spd_csr(&k).map_err(|e| LrnsError::SampleSolve {
            sample: m,
            step: 0,
            source: Box::new(e),
        })
    }

    /// Interior states of sample `m` from direct solves.
    pub fn reference_states(&self, m: usize) -> Result<Vec<Vec<f64>>> {
        let f = self.sample_factorization(m)?;
        Ok(self.march(m, |rhs| f.solve(rhs)))
    }

    /// Neumann operator around `K̄` with the compressed basis at ratio `tau`.
    pub fn lrns_operator(&self, tau: f64, terms: usize) -> Result<(NeumannOperator, SolveReport)> {
        neumann_around(
            &self.config,
            &self.system.factorization,
            &self.perturbations,
            self.mesh.num_nodes(),
            tau,
            terms,
        )
    }

    /// Interior states of sample `m` through the Neumann operator.
    pub fn lrns_states(&self, op: &NeumannOperator, m: usize) -> Vec<Vec<f64>> {
        self.march(m, |rhs| op.apply_inverse(m, rhs))
    }
}

/// Mean nodal fields at `t_0, …, t_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoITrajectory {
    pub solver: String,
    pub config_hash: String,
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

impl QoITrajectory {
    /// Writes `t,x,y,value` rows, time-major then node order.
    pub fn write_csv(&self, mesh: &StructuredMesh, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,x,y,value")?;
        for (t, field) in self.times.iter().zip(&self.fields) {
            let t = fmt_f64(*t);
            for (p, v) in mesh.coords().iter().zip(field) {
                writeln!(out, "{t},{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v))?;
            }
        }
        Ok(())
    }
}

fn check_comparable(a: &QoITrajectory, b: &QoITrajectory, mass: &CsrMatrix) -> Result<()> {
    if a.fields.len() != b.fields.len() || a.fields.iter().zip(&b.fields).any(|(x, y)| x.len() != y.len() || x.len() != mass.rows()) {
        return Err(LrnsError::Dimension("trajectories differ in steps or nodes".into()));
    }
    Ok(())
}

/// Relative discrete space-time L² error
/// `√(Σ_l Δt eᵀ G e) / √(Σ_l Δt bᵀ G b)` with `e = a − b`, over `l = 0..=L`.
pub fn qoi_error(a: &QoITrajectory, b: &QoITrajectory, mass: &CsrMatrix, dt: f64) -> Result<f64> {
    check_comparable(a, b, mass)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.fields.iter().zip(&b.fields) {
        let e: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        num += dt * dot(&e, &mass.matvec(&e));
        den += dt * dot(y, &mass.matvec(y));
    }
    if !(den > 0.0) {
        return Err(invalid("reference", "trajectory has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// Mean of the squared nodal differences over all slices.
pub fn qoi_mean_square_error(a: &QoITrajectory, b: &QoITrajectory, mass: &CsrMatrix) -> Result<f64> {
    check_comparable(a, b, mass)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.fields.iter().zip(&b.fields) {
        sum += x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

pub fn timed<T>(timings: &mut Vec<Timing>, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(Timing {
        phase: phase.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Result of one solver run.
#[derive(Clone, Debug)]
pub struct DiffusionRun {
    pub trajectory: QoITrajectory,
    pub report: Option<SolveReport>,
    pub rank: Option<usize>,
    pub timings: Vec<Timing>,
}

/// Strategy computing the mean trajectory of a problem.
pub trait DiffusionSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, problem: &DiffusionProblem) -> Result<DiffusionRun>;
}

/// Direct Monte-Carlo finite-element solves.
pub struct ReferenceSolver;

impl DiffusionSolver for ReferenceSolver {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn solve(&self, problem: &DiffusionProblem) -> Result<DiffusionRun> {
        let mut timings = Vec::new();
        let trajectory = timed(&mut timings, "reference-solve", || {
            problem.mean_trajectory(self.name(), |m| problem.reference_states(m))
        })?;
        Ok(DiffusionRun {
            trajectory,
            report: None,
            rank: None,
            timings,
        })
    }
}

/// Low-rank compression plus truncated Neumann series, with τ and R taken
/// from the problem configuration.
pub struct LrnsSolver;

impl DiffusionSolver for LrnsSolver {
    fn name(&self) -> &'static str {
        "lrns"
    }

    fn solve(&self, problem: &DiffusionProblem) -> Result<DiffusionRun> {
        lrns_run(problem, problem.config.tau, problem.config.neumann_terms)
    }
}

/// LRNS run at an explicit ratio and truncation index.
pub fn lrns_run(problem: &DiffusionProblem, tau: f64, terms: usize) -> Result<DiffusionRun> {
    let mut timings = Vec::new();
    let (op, report) = timed(&mut timings, "compression", || problem.lrns_operator(tau, terms))?;
    let trajectory = timed(&mut timings, "lrns-solve", || {
        problem.mean_trajectory("lrns", |m| Ok(problem.lrns_states(&op, m)))
    })?;
    Ok(DiffusionRun {
        trajectory,
        report: Some(report),
        rank: Some(op.rank()),
        timings,
    })
}

/// Built-in solvers: `reference` and `lrns`.
pub fn diffusion_solvers() -> Registry<dyn DiffusionSolver> {
    let mut reg: Registry<dyn DiffusionSolver> = Registry::new("diffusion solver");
    reg.register("reference", Arc::new(ReferenceSolver));
    reg.register("lrns", Arc::new(LrnsSolver));
    reg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    /// `⌈τN⌉` over all mesh nodes.
    pub rank: usize,
    /// Columns of the interior basis actually used.
    pub basis_rank: usize,
    pub error: f64,
    pub mean_square_error: f64,
    pub rho_max: f64,
    pub seconds: f64,
}

/// One LRNS run per ratio against a shared reference trajectory.
pub fn scan_tau(problem: &DiffusionProblem, reference: &QoITrajectory, taus: &[f64]) -> Result<Vec<TauRow>> {
    taus.iter()
        .map(|&tau| {
            let start = Instant::now();
            let run = lrns_run(problem, tau, problem.config.neumann_terms)?;
            Ok(TauRow {
                tau,
                rank: compression_rank(tau, problem.mesh.num_nodes(), problem.num_interior())?.0,
                basis_rank: run.rank.unwrap_or(0),
                error: qoi_error(&run.trajectory, reference, &problem.mass, problem.dt())?,
                mean_square_error: qoi_mean_square_error(&run.trajectory, reference, &problem.mass)?,
                rho_max: run.report.map_or(0.0, |r| r.rho_max),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Writes `tau,k,basis_rank,error,mean_square_error,rho_max`; run times are left out
/// so that reruns produce identical files.
pub fn write_tau_csv(rows: &[TauRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "tau,k,basis_rank,error,mean_square_error,rho_max")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(r.tau),
            r.rank,
            r.basis_rank,
            fmt_f64(r.error),
            fmt_f64(r.mean_square_error),
            fmt_f64(r.rho_max)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma: f64,
    pub terms: usize,
    pub error: f64,
    pub rho_max: f64,
}

/// Error grid over σ and R. Every σ reuses the same draws, scaled.
pub fn scan_sigma(config: &DiffusionConfig, sigmas: &[f64], terms: &[usize]) -> Result<Vec<SigmaRow>> {
    let mut rows = Vec::with_capacity(sigmas.len() * terms.len());
    for &sigma in sigmas {
        let cfg = DiffusionConfig {
            sigma,
            ..config.clone()
        };
        let problem = DiffusionProblem::build(&cfg)?;
        let reference = ReferenceSolver.solve(&problem)?.trajectory;
        let max_terms = terms.iter().copied().max().unwrap_or(0);
        let (op, report) = problem.lrns_operator(cfg.tau, max_terms)?;
        for &r in terms {
            let op_r = op.with_terms(r);
            let lrns = problem.mean_trajectory("lrns", |m| Ok(problem.lrns_states(&op_r, m)))?;
            rows.push(SigmaRow {
                sigma,
                terms: r,
                error: qoi_error(&lrns, &reference, &problem.mass, problem.dt())?,
                rho_max: report.rho_max,
            });
        }
    }
    Ok(rows)
}

pub fn write_sigma_csv(rows: &[SigmaRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "sigma,R,error,rho_max")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", fmt_f64(r.sigma), r.terms, fmt_f64(r.error), fmt_f64(r.rho_max))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn small(sigma: f64) -> DiffusionConfig {
        DiffusionConfig {
            cells: 6,
            steps: 10,
            final_time: 0.1,
            samples: 8,
            sigma,
            kl_terms: 5,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn cn_matrix_arithmetic() {
        let eye = CsrMatrix::from_dense(&DenseMatrix::identity(3));
        let s = assemble_cn(&eye, &eye, 0.01).unwrap();
        assert_eq!(s.k_bar.to_dense(), DenseMatrix::identity(3).scaled(201.0));
        let far = assemble_cn(&eye, &eye.scaled(3.0), 1e12).unwrap();
        assert!((far.k_bar.get(0, 0) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn homogeneous_decay_reduces_energy() {
        let cfg = DiffusionConfig {
            source: "zero".into(),
            ..small(0.0)
        };
        let p = DiffusionProblem::build(&cfg).unwrap();
        let states = p.reference_states(0).unwrap();
        let energy: Vec<f64> = states.iter().map(|u| dot(u, &p.system.mass.matvec(u))).collect();
        assert!(energy.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_sigma_samples_match_deterministic_path() {
        let p = DiffusionProblem::build(&small(0.0)).unwrap();
        let det = p.march(0, |rhs| p.system.factorization.solve(rhs));
        for m in 0..p.samples() {
            assert_eq!(p.reference_states(m).unwrap(), det);
        }
        let lrns = lrns_run(&p, 0.3, 2).unwrap().trajectory;
        let reference = ReferenceSolver.solve(&p).unwrap().trajectory;
        assert_eq!(lrns.fields, reference.fields);
    }

    #[test]
    fn steady_limit_matches_elliptic_solve() {
        let cfg = DiffusionConfig {
            cells: 6,
            steps: 200,
            final_time: 4.0,
            samples: 1,
            sigma: 0.0,
            kl_terms: 1,
            initial: "zero".into(),
            ..DiffusionConfig::default()
        };
        let p = DiffusionProblem::build(&cfg).unwrap();
        let states = p.reference_states(0).unwrap();
        let mesh = &p.mesh;
        let a = p.dofs.restrict_matrix(&assemble_stiffness(mesh, Coefficient::Constant(1.0)).unwrap()).unwrap();
        let b = p.dofs.restrict_vector(&assemble_load(mesh, |_, _| 1.0)).unwrap();
        let steady = factorize_spd_csr(&a).unwrap().solve(&b);
        let last = states.last().unwrap();
        let diff = last.iter().zip(&steady).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn full_rank_lrns_matches_reference() {
        let cfg = DiffusionConfig {
            neumann_terms: 30,
            tau: 1.0,
            ..small(0.1)
        };
        let p = DiffusionProblem::build(&cfg).unwrap();
        let reference = ReferenceSolver.solve(&p).unwrap().trajectory;
        let lrns = LrnsSolver.solve(&p).unwrap();
        assert!(lrns.report.as_ref().unwrap().rho_max < 0.5);
        let err = qoi_error(&lrns.trajectory, &reference, &p.mass, p.dt()).unwrap();
        assert!(err <= 1e-6, "{err}");
        assert_eq!(lrns.trajectory.fields[0], reference.fields[0]);
        assert_eq!(lrns.trajectory.fields[0], p.initial);
    }

    #[test]
    fn error_metric_examples() {
        let mass = CsrMatrix::from_dense(&DenseMatrix::identity(2));
        let a = QoITrajectory {
            solver: "a".into(),
            config_hash: String::new(),
            times: vec![0.0, 0.1],
            fields: vec![vec![1.0, 2.0], vec![0.5, -1.0]],
        };
        let mut b = a.clone();
        assert_eq!(qoi_error(&a, &b, &mass, 0.1).unwrap(), 0.0);
        b.fields.iter_mut().flatten().for_each(|v| *v *= 2.0);
        assert!((qoi_error(&a, &b, &mass, 0.1).unwrap() - 0.5).abs() < 1e-15);
        let zero = QoITrajectory {
            fields: vec![vec![0.0; 2]; 2],
            ..a.clone()
        };
        assert!(qoi_error(&a, &zero, &mass, 0.1).is_err());
    }

    #[test]
    fn nonzero_boundary_data_reaches_the_boundary() {
        let cfg = DiffusionConfig {
            boundary: "x-plus-y".into(),
            source: "zero".into(),
            initial: "x-plus-y".into(),
            ..small(0.0)
        };
        let p = DiffusionProblem::build(&cfg).unwrap();
        let reference = ReferenceSolver.solve(&p).unwrap().trajectory;
        // A linear state matching the boundary data is steady for constant permeability.
        for field in &reference.fields {
            for (v, e) in field.iter().zip(&p.initial) {
                assert!((v - e).abs() < 1e-10);
            }
        }
        let p = DiffusionProblem::build(&DiffusionConfig { sigma: 0.1, ..cfg }).unwrap();
        let reference = ReferenceSolver.solve(&p).unwrap().trajectory;
        for (field, t) in reference.fields.iter().zip(&p.times()) {
            for (node, v) in field.iter().enumerate() {
                if p.mesh.is_boundary(node) {
                    let [x, y] = p.mesh.coords()[node];
                    assert!((v - (x + y)).abs() < 1e-14, "t = {t}");
                }
            }
        }
        let lrns = lrns_run(&p, 1.0, 30).unwrap().trajectory;
        assert!(qoi_error(&lrns, &reference, &p.mass, p.dt()).unwrap() < 1e-8);
    }

    #[test]
    fn tau_scan_rows() {
        let p = DiffusionProblem::build(&small(0.2)).unwrap();
        let reference = ReferenceSolver.solve(&p).unwrap().trajectory;
        let rows = scan_tau(&p, &reference, &[1.0, 0.3]).unwrap();
        assert_eq!((rows[0].rank, rows[0].basis_rank), (49, 25));
        assert_eq!((rows[1].rank, rows[1].basis_rank), (15, 15));
        assert!(rows[0].error < rows[1].error);
        let mut out = Vec::new();
        write_tau_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }

    #[test]
    fn zero_sigma_row_is_exact() {
        let rows = scan_sigma(&small(0.0), &[0.0], &[0, 3]).unwrap();
        assert!(rows.iter().all(|r| r.error <= 1e-12));
    }

    #[test]
    fn unknown_function_is_named() {
        let cfg = DiffusionConfig {
            source: "nonexistent".into(),
            ..small(0.1)
        };
        let err = DiffusionProblem::build(&cfg).err().unwrap();
        assert_eq!(err.field_path(), Some("source"));
        assert!(err.to_string().contains("nonexistent"), "{err}");
    }
}
