//! Distributed optimal control of the random diffusion problem.
//!
//! Backward Euler with `K̄ = G/Δt + Ā` gives, per sample, the state map
//! `u_{m,l+1} = Z_m (f_{l+1} + u_{m,l}/Δt)` where `Z_m` is the truncated
//! Neumann approximation of `(K̄ + K̃_m)⁻¹ G`. The objective is
//!
//! `Ĵ(f) = (1/M) Σ_m Σ_l (Δt/2) ‖u_{m,l} − U_l‖²_G + Σ_l (βΔt/2) ‖f_l‖²_G`.
//!
//! The gradient treats `u_{m,l−1}` as frozen, so it is the exact gradient of
//! a quadratic surrogate whose Hessian is the block-constant
//! `H = (1/M) Σ_m Δt Z_mᵀ G Z_m + βΔt G`. Line searches run on that
//! surrogate, so every accepted step lowers the surrogate; `Ĵ` itself is
//! recorded alongside and need not decrease monotonically.
//!
//! Only homogeneous Dirichlet data are supported.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{neumann_around, DiffusionConfig, RandomOperators};
use crate::error::{invalid, LrnsError, Result};
use crate::fem::{assemble_mass, assemble_stiffness, build_mesh, Coefficient, DofMap, StructuredMesh};
use crate::functions::builtin_functions;
use crate::io::fmt_f64;
use crate::linalg::{axpy, dot, factorize_spd, factorize_spd_csr, CsrMatrix, DenseMatrix, SymmetricFactorization};
use crate::neumann::{NeumannOperator, SolveReport};
use crate::parallel::ordered_fold;
use crate::registry::Registry;
use crate::rng::{split_seed, stream};

/// Control values `f_1, …, f_L` on the interior nodes.
pub type Control = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// `Δt Z_mᵀ G (u_{m,l} − U_l)` with the propagated state.
    FrozenState,
    /// `Δt Z_mᵀ G (Z_m f_l − U_l)`, dropping the carried-over state.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Discretization, samples and LRNS settings. `source` is unused.
    pub problem: DiffusionConfig,
    /// Registry name of the desired state `U`.
    pub target: String,
    pub beta: f64,
    /// Stop once the L²(0,T;L²) norm of the gradient is below this,
    /// relative to its initial value unless `relative_tolerance` is off.
    pub tolerance: f64,
    pub relative_tolerance: bool,
    /// Step halvings allowed per iteration.
    pub max_line_search: usize,
    pub optimizer: String,
    pub max_iterations: usize,
    pub batch_size: usize,
    /// SGD evaluates the full gradient every this many iterations.
    pub check_every: usize,
    /// SGD scales its line-search step at iteration `k` by `d / (d + k)`;
    /// without the decay the iterates stall at the minibatch noise level.
    pub step_decay: f64,
    pub gradient_mode: GradientMode,
    /// Dense `Z_m` are stored only if they fit in this many bytes.
    pub dense_budget_bytes: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            problem: DiffusionConfig {
                initial: "sin2pix-sinpiy".into(),
                source: "zero".into(),
                ..DiffusionConfig::default()
            },
            target: "decaying-sin2pix-sinpiy".into(),
            beta: 1e-3,
            tolerance: 1e-3,
            relative_tolerance: true,
            max_line_search: 50,
            optimizer: "newton".into(),
            max_iterations: 1000,
            batch_size: 32,
            check_every: 10,
            step_decay: 10.0,
            gradient_mode: GradientMode::FrozenState,
            dense_budget_bytes: 1 << 30,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate().map_err(|e| e.at("problem"))?;
        if !builtin_functions().get(&self.problem.boundary)?.is_zero() {
            return Err(invalid("boundary", "the control problem supports homogeneous Dirichlet data only").at("problem"));
        }
        builtin_functions().get(&self.target).map_err(|e| e.at("target"))?;
        optimizers().get(&self.optimizer).map_err(|e| e.at("optimizer"))?;
        if !(self.beta > 0.0) {
            return Err(invalid("beta", "must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        if !(self.step_decay > 0.0) {
            return Err(invalid("step_decay", "must be positive"));
        }
        if self.batch_size == 0 || self.check_every == 0 {
            return Err(invalid("batch_size", "batch size and check interval must be at least 1"));
        }
        Ok(())
    }
}

enum StateMaps {
    Dense(Vec<DenseMatrix>),
    MatrixFree,
}

/// Objective, gradient and gradient norm at one control.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objective: f64,
    /// Surrogate value at the same control: equal to `objective` for the
    /// frozen-state gradient, the decoupled objective for the literal one.
    pub surrogate: f64,
    pub tracking: f64,
    pub regularization: f64,
    pub gradient: Control,
    pub gradient_norm: f64,
}

/// `H`, symmetrized, with the asymmetry measured before symmetrization.
#[derive(Clone, Debug)]
pub struct Hessian {
    pub matrix: DenseMatrix,
    pub raw_asymmetry: f64,
}

pub struct ControlProblem {
    pub config: ControlConfig,
    pub mesh: StructuredMesh,
    pub dofs: DofMap,
    /// Interior mass matrix `G`.
    pub mass: CsrMatrix,
    mass_factorization: SymmetricFactorization,
    pub random: RandomOperators,
    pub operator: NeumannOperator,
    pub report: SolveReport,
    maps: StateMaps,
    /// Interior `u₀`.
    pub initial: Vec<f64>,
    /// Interior `U_1, …, U_L`.
    pub targets: Vec<Vec<f64>>,
}

impl ControlProblem {
    pub fn build(config: &ControlConfig) -> Result<Self> {
        config.validate()?;
        let pc = &config.problem;
        let functions = builtin_functions();
        let initial_fn = functions.get(&pc.initial)?;
        let target_fn = functions.get(&config.target)?;

        let mesh = build_mesh(pc.cells)?;
        let dofs = DofMap::new(&mesh);
        let dt = pc.dt();
        let mass = dofs.restrict_matrix(&assemble_mass(&mesh))?;
        let mean = dofs.restrict_matrix(&assemble_stiffness(&mesh, Coefficient::Constant(pc.mean_coefficient))?)?;
        let k_bar = mass.linear_combination(1.0 / dt, &mean, 1.0)?;
        let k_fact = Arc::new(factorize_spd_csr(&k_bar)?);
        let mass_factorization = factorize_spd_csr(&mass)?;

        let random = RandomOperators::build(pc, &mesh, &dofs, false)?;
        let (operator, report) = neumann_around(
            pc,
            &k_fact,
            &random.perturbations,
            mesh.num_nodes(),
            pc.tau,
            pc.neumann_terms,
        )?;

        let n = dofs.num_interior();
        let dense_bytes = pc.samples.saturating_mul(n * n).saturating_mul(8);
        let maps = if dense_bytes <= config.dense_budget_bytes {
            let g = mass.to_dense();
            StateMaps::Dense(crate::parallel::ordered_map(pc.samples, |m| Ok(operator.apply_inverse_block(m, &g)))?)
        } else {
            StateMaps::MatrixFree
        };

        let initial = dofs.restrict_vector(&mesh.interpolate(|x, y| initial_fn.eval(x, y, 0.0)))?;
        let targets = (1..=pc.steps)
            .map(|l| {
                let t = l as f64 * dt;
                dofs.restrict_vector(&mesh.interpolate(|x, y| target_fn.eval(x, y, t)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            mesh,
            dofs,
            mass,
            mass_factorization,
            random,
            operator,
            report,
            maps,
            initial,
            targets,
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.problem.dt()
    }

    pub fn steps(&self) -> usize {
        self.config.problem.steps
    }

    pub fn samples(&self) -> usize {
        self.random.perturbations.len()
    }

    pub fn dim(&self) -> usize {
        self.dofs.num_interior()
    }

    pub fn has_dense_maps(&self) -> bool {
        matches!(self.maps, StateMaps::Dense(_))
    }

    pub fn zero_control(&self) -> Control {
        vec![vec![0.0; self.dim()]; self.steps()]
    }

    /// `Z_m x`.
    pub fn apply_state_map(&self, m: usize, x: &[f64]) -> Vec<f64> {
        match &self.maps {
            StateMaps::Dense(z) => z[m].matvec(x),
            StateMaps::MatrixFree => self.operator.apply_inverse(m, &self.mass.matvec(x)),
        }
    }

    /// `Z_mᵀ y`.
    pub fn apply_state_map_transpose(&self, m: usize, y: &[f64]) -> Vec<f64> {
        match &self.maps {
            StateMaps::Dense(z) => z[m].tr_matvec(y),
            StateMaps::MatrixFree => self.mass.matvec(&self.operator.apply_inverse_transpose(m, y)),
        }
    }

    /// States `u_{m,0..=L}` of sample `m` under control `f`.
    pub fn forward(&self, m: usize, f: &Control) -> Vec<Vec<f64>> {
        let inv_dt = 1.0 / self.dt();
        let mut states = Vec::with_capacity(self.steps() + 1);
        states.push(self.initial.clone());
        for fl in f {
            let prev = states.last().expect("initial state");
            let mut rhs = fl.clone();
            axpy(&mut rhs, inv_dt, prev);
            states.push(self.apply_state_map(m, &rhs));
        }
        states
    }

    fn check_control(&self, f: &Control) -> Result<()> {
        if f.len() != self.steps() || f.iter().any(|v| v.len() != self.dim()) {
            return Err(LrnsError::Dimension(format!(
                "control must have {} steps of {} values",
                self.steps(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn g_norm2(&self, v: &[f64]) -> f64 {
        dot(v, &self.mass.matvec(v))
    }

    fn regularization(&self, f: &Control) -> f64 {
        let c = 0.5 * self.config.beta * self.dt();
        f.iter().map(|v| c * self.g_norm2(v)).sum()
    }

    /// Objective and gradient averaged over every sample.
    pub fn evaluate(&self, f: &Control) -> Result<Evaluation> {
        let all: Vec<usize> = (0..self.samples()).collect();
        self.evaluate_subset(f, &all)
    }

    /// Objective and gradient averaged over `samples`.
    pub fn evaluate_subset(&self, f: &Control, samples: &[usize]) -> Result<Evaluation> {
        self.check_control(f)?;
        if samples.is_empty() {
            return Err(invalid("samples", "need at least one sample"));
        }
        let dt = self.dt();
        let mode = self.config.gradient_mode;
        let (tracking, decoupled, mut gradient) = ordered_fold(
            samples.len(),
            |i| {
                let m = samples[i];
                let states = self.forward(m, f);
                let mut tracking = 0.0;
                let mut decoupled = 0.0;
                let mut grad = Vec::with_capacity(self.steps());
                for (l, target) in self.targets.iter().enumerate() {
                    let u = &states[l + 1];
                    let e: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - b).collect();
                    tracking += 0.5 * dt * self.g_norm2(&e);
                    let residual = match mode {
                        GradientMode::FrozenState => e,
                        GradientMode::Literal => {
                            let zf = self.apply_state_map(m, &f[l]);
                            let r: Vec<f64> = zf.iter().zip(target).map(|(a, b)| a - b).collect();
                            decoupled += 0.5 * dt * self.g_norm2(&r);
                            r
                        }
                    };
                    let mut g = self.apply_state_map_transpose(m, &self.mass.matvec(&residual));
                    g.iter_mut().for_each(|v| *v *= dt);
                    grad.push(g);
                }
                Ok((tracking, decoupled, grad))
            },
            (0.0, 0.0, self.zero_control()),
            |(t, c, mut acc), _, (tm, cm, gm)| {
                for (a, g) in acc.iter_mut().zip(&gm) {
                    axpy(a, 1.0, g);
                }
                (t + tm, c + cm, acc)
            },
        )?;
        let scale = 1.0 / samples.len() as f64;
        let reg_scale = self.config.beta * dt;
        for (g, fl) in gradient.iter_mut().zip(f) {
            g.iter_mut().for_each(|v| *v *= scale);
            self.mass.matvec_add(reg_scale, fl, g);
        }
        let tracking = tracking * scale;
        let regularization = self.regularization(f);
        let objective = tracking + regularization;
        let surrogate = match mode {
            GradientMode::FrozenState => objective,
            GradientMode::Literal => decoupled * scale + regularization,
        };
        let gradient_norm = self.dual_norm(&gradient);
        Ok(Evaluation {
            objective,
            surrogate,
            tracking,
            regularization,
            gradient,
            gradient_norm,
        })
    }

    /// Gradient norm at which a run starting from `initial_norm` stops.
    pub fn stopping_threshold(&self, initial_norm: f64) -> f64 {
        if self.config.relative_tolerance {
            self.config.tolerance * initial_norm
        } else {
            self.config.tolerance
        }
    }

    /// Objective of the quadratic model at `f`, with the carried-over
    /// states taken from the trajectory generated by `frozen`. In literal
    /// mode the carried-over states are dropped.
    pub fn surrogate_objective(&self, frozen: &Control, f: &Control) -> Result<f64> {
        self.check_control(frozen)?;
        self.check_control(f)?;
        let dt = self.dt();
        let inv_dt = 1.0 / dt;
        let literal = self.config.gradient_mode == GradientMode::Literal;
        let tracking = ordered_fold(
            self.samples(),
            |m| {
                let states = self.forward(m, frozen);
                let mut sum = 0.0;
                for (l, target) in self.targets.iter().enumerate() {
                    let mut rhs = f[l].clone();
                    if !literal {
                        axpy(&mut rhs, inv_dt, &states[l]);
                    }
                    let u = self.apply_state_map(m, &rhs);
                    let e: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - b).collect();
                    sum += 0.5 * dt * self.g_norm2(&e);
                }
                Ok(sum)
            },
            0.0,
            |acc, _, v| acc + v,
        )?;
        Ok(tracking / self.samples() as f64 + self.regularization(f))
    }

    /// `Σ_l d_lᵀ H_S d_l` with `H_S` averaged over `samples`.
    pub fn curvature(&self, d: &Control, samples: &[usize]) -> Result<f64> {
        self.check_control(d)?;
        let dt = self.dt();
        let tracking = ordered_fold(
            samples.len(),
            |i| Ok(d.iter().map(|dl| dt * self.g_norm2(&self.apply_state_map(samples[i], dl))).sum::<f64>()),
            0.0,
            |acc, _, v| acc + v,
        )?;
        Ok(tracking / samples.len() as f64 + 2.0 * self.regularization(d))
    }

    /// `H x` without forming `H`.
    pub fn hessian_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dt = self.dt();
        let mut out = crate::parallel::ordered_vec_sum(self.samples(), self.dim(), |m| {
            let gz = self.mass.matvec(&self.apply_state_map(m, x));
            Ok(self.apply_state_map_transpose(m, &gz))
        })?;
        let scale = dt / self.samples() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        self.mass.matvec_add(self.config.beta * dt, x, &mut out);
        Ok(out)
    }

    /// Assembles `H` from the dense state maps, or column by column when
    /// they are not stored.
    pub fn hessian(&self) -> Result<Hessian> {
        let n = self.dim();
        let dt = self.dt();
        let mut matrix = match &self.maps {
            StateMaps::Dense(z) => {
                let mut sum = ordered_fold(
                    self.samples(),
                    |m| z[m].transpose_matmul(&self.mass.matmul_dense(&z[m])?),
                    DenseMatrix::zeros(n, n),
                    |mut acc, _, t| {
                        acc.add_scaled(1.0, &t);
                        acc
                    },
                )?;
                sum = sum.scaled(dt / self.samples() as f64);
                sum.add_scaled(self.config.beta * dt, &self.mass.to_dense());
                sum
            }
            StateMaps::MatrixFree => {
                let mut h = DenseMatrix::zeros(n, n);
                for j in 0..n {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    h.set_column(j, &self.hessian_apply(&e)?);
                }
                h
            }
        };
        let raw_asymmetry = matrix.asymmetry();
        matrix = matrix.symmetrized();
        Ok(Hessian { matrix, raw_asymmetry })
    }

    /// `√(Σ_l g_lᵀ G⁻¹ g_l / Δt)`, the L²(0,T;L²) norm of the function
    /// represented by the algebraic gradient.
    pub fn dual_norm(&self, g: &Control) -> f64 {
        let sum: f64 = g.iter().map(|gl| dot(gl, &self.mass_factorization.solve(gl))).sum();
        (sum / self.dt()).sqrt()
    }

    /// Mean states `(1/M) Σ_m u_{m,l}` for `l = 0..=L`, interior only.
    pub fn mean_states(&self, f: &Control) -> Result<Vec<Vec<f64>>> {
        self.check_control(f)?;
        let n = self.dim();
        let sum = ordered_fold(
            self.samples(),
            |m| Ok(self.forward(m, f)),
            vec![vec![0.0; n]; self.steps() + 1],
            |mut acc, _, states| {
                for (a, u) in acc.iter_mut().zip(&states) {
                    axpy(a, 1.0, u);
                }
                acc
            },
        )?;
        let scale = 1.0 / self.samples() as f64;
        Ok(sum.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect())
    }

    /// Writes `t,x,y,value` for `f_1, …, f_L` extended by zero boundary values.
    pub fn write_control_csv(&self, f: &Control, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,x,y,value")?;
        let zeros = vec![0.0; self.dofs.boundary().len()];
        for (l, fl) in f.iter().enumerate() {
            let t = fmt_f64((l + 1) as f64 * self.dt());
            let full = self.dofs.extend(fl, &zeros);
            for (p, v) in self.mesh.coords().iter().zip(&full) {
                writeln!(out, "{t},{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v))?;
            }
        }
        Ok(())
    }
}

/// `Σ_l a_l · b_l`.
pub fn inner(a: &Control, b: &Control) -> f64 {
    a.iter().zip(b).map(|(x, y)| dot(x, y)).sum()
}

fn step(f: &Control, alpha: f64, d: &Control) -> Control {
    f.iter()
        .zip(d)
        .map(|(fl, dl)| {
            let mut v = fl.clone();
            axpy(&mut v, alpha, dl);
            v
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    /// Growth factor while no bracket has been found.
    pub expansion: f64,
    pub max_trials: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            expansion: 4.0,
            max_trials: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub value: f64,
    pub trials: usize,
}

/// Bracketing and zoom search for a step satisfying the strong Wolfe
/// conditions. `phi` returns the value and the derivative at `α`.
pub fn strong_wolfe(phi: impl Fn(f64) -> (f64, f64), alpha0: f64, p: &WolfeParams) -> Option<LineSearchOutcome> {
    let (phi0, dphi0) = phi(0.0);
    if !(dphi0 < 0.0) || !(alpha0 > 0.0) {
        return None;
    }
    let sufficient = |a: f64, v: f64| v <= phi0 + p.c1 * a * dphi0;
    let curvature = |dv: f64| dv.abs() <= -p.c2 * dphi0;
    let mut prev = (0.0, phi0, dphi0);
    let mut alpha = alpha0;
    let mut trials = 0;
    while trials < p.max_trials {
        trials += 1;
        let (v, dv) = phi(alpha);
        if !sufficient(alpha, v) || (trials > 1 && v >= prev.1) {
            return zoom(&phi, prev, (alpha, v, dv), trials, &sufficient, &curvature, p);
        }
        if curvature(dv) {
            return Some(LineSearchOutcome { alpha, value: v, trials });
        }
        if dv >= 0.0 {
            return zoom(&phi, (alpha, v, dv), prev, trials, &sufficient, &curvature, p);
        }
        prev = (alpha, v, dv);
        alpha *= p.expansion;
    }
    None
}

fn zoom(
    phi: &impl Fn(f64) -> (f64, f64),
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut trials: usize,
    sufficient: &impl Fn(f64, f64) -> bool,
    curvature: &impl Fn(f64) -> bool,
    p: &WolfeParams,
) -> Option<LineSearchOutcome> {
    while trials < p.max_trials {
        trials += 1;
        let a = interpolate(lo, hi);
        let (v, dv) = phi(a);
        if !sufficient(a, v) || v >= lo.1 {
            hi = (a, v, dv);
        } else {
            if curvature(dv) {
                return Some(LineSearchOutcome { alpha: a, value: v, trials });
            }
            if dv * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, v, dv);
        }
    }
    None
}

/// Minimizer of the quadratic through `lo` (value and slope) and `hi`
/// (value), or the midpoint when that falls outside the bracket.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let d = hi.0 - lo.0;
    let c = (hi.1 - lo.1 - lo.2 * d) / (d * d);
    let mid = lo.0 + 0.5 * d;
    if c > 0.0 {
        let a = lo.0 - lo.2 / (2.0 * c);
        let (left, right) = if d > 0.0 { (lo.0, hi.0) } else { (hi.0, lo.0) };
        let margin = 1e-3 * d.abs();
        if a > left + margin && a < right - margin {
            return a;
        }
    }
    mid
}

/// Halves `α` from `alpha0` until the Armijo condition holds.
pub fn armijo(phi: impl Fn(f64) -> f64, dphi0: f64, alpha0: f64, c1: f64, max_trials: usize) -> Option<LineSearchOutcome> {
    let phi0 = phi(0.0);
    let mut alpha = alpha0;
    for trials in 1..=max_trials {
        let v = phi(alpha);
        if v <= phi0 + c1 * alpha * dphi0 {
            return Some(LineSearchOutcome { alpha, value: v, trials });
        }
        alpha *= 0.5;
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    IterationLimit,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `Ĵ` at the iterate.
    pub objective: f64,
    /// Surrogate value at the iterate.
    pub surrogate: f64,
    /// Surrogate value reached by the step, with the carried-over states of
    /// the previous iterate.
    pub model: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub optimizer: String,
    pub status: Status,
    /// Accepted steps.
    pub iterations: usize,
    /// Gradient norm at which the run counts as converged.
    pub threshold: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
    pub records: Vec<IterationRecord>,
    #[serde(skip)]
    pub control: Control,
}

impl OptimizationTrace {
    pub fn ratio(&self) -> f64 {
        self.final_objective / self.initial_objective
    }

    /// Records whose objective exceeds the previous one.
    pub fn increases(&self) -> usize {
        self.records.windows(2).filter(|w| w[1].objective > w[0].objective).count()
    }

    /// Steps whose surrogate value does not fall below the previous
    /// iterate's surrogate value.
    pub fn model_increases(&self) -> usize {
        self.records.windows(2).filter(|w| w[1].model >= w[0].surrogate).count()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iteration,objective,model,gradient_norm,step,trials")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration,
                fmt_f64(r.objective),
                fmt_f64(r.model),
                fmt_f64(r.gradient_norm),
                fmt_f64(r.step),
                r.trials
            )?;
        }
        Ok(())
    }
}

fn record(iteration: usize, e: &Evaluation, model: f64, step: f64, trials: usize) -> IterationRecord {
    IterationRecord {
        iteration,
        objective: e.objective,
        surrogate: e.surrogate,
        model,
        gradient_norm: e.gradient_norm,
        step,
        trials,
    }
}

/// Strategy minimizing the objective from a starting control.
pub trait Optimizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, problem: &ControlProblem, initial: Control) -> Result<OptimizationTrace>;
}

/// Direction and first trial step of a line-search method.
trait Descent {
    fn direction(&mut self, problem: &ControlProblem, eval: &Evaluation) -> Result<Control>;
    fn initial_step(&mut self, slope: f64) -> f64;

    /// Called with the accepted step and the slope it was taken along.
    fn accepted(&mut self, _alpha: f64, _slope: f64) {}
}

/// Shared loop: surrogate Wolfe search, then halving until `Ĵ` does not grow.
fn descent_loop(
    name: &str,
    problem: &ControlProblem,
    initial: Control,
    method: &mut dyn Descent,
) -> Result<OptimizationTrace> {
    let cfg = &problem.config;
    let all: Vec<usize> = (0..problem.samples()).collect();
    let params = WolfeParams {
        max_trials: cfg.max_line_search,
        ..WolfeParams::default()
    };
    let mut f = initial;
    let mut eval = problem.evaluate(&f)?;
    let initial_objective = eval.objective;
    let threshold = problem.stopping_threshold(eval.gradient_norm);
    let mut records = vec![record(0, &eval, eval.surrogate, 0.0, 0)];
    let mut status = Status::IterationLimit;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if eval.gradient_norm <= threshold {
            status = Status::Converged;
            break;
        }
        let d = method.direction(problem, &eval)?;
        let slope = inner(&eval.gradient, &d);
        let curv = problem.curvature(&d, &all)?;
        let phi0 = eval.surrogate;
        let model = |a: f64| (phi0 + a * slope + 0.5 * a * a * curv, slope + a * curv);
        let Some(found) = strong_wolfe(model, method.initial_step(slope), &params) else {
            status = Status::LineSearchFailed;
            break;
        };
        method.accepted(found.alpha, slope);
        f = step(&f, found.alpha, &d);
        eval = problem.evaluate(&f)?;
        iterations += 1;
        records.push(record(iterations, &eval, found.value, found.alpha, found.trials));
    }
    if status == Status::IterationLimit && eval.gradient_norm <= threshold {
        status = Status::Converged;
    }
    Ok(OptimizationTrace {
        optimizer: name.to_string(),
        status,
        iterations,
        threshold,
        initial_objective,
        final_objective: eval.objective,
        final_gradient_norm: eval.gradient_norm,
        records,
        control: f,
    })
}

/// `d_l = −H⁻¹ g_l` with the block Hessian factorized once.
pub struct Newton;

struct NewtonDescent {
    factorization: Option<SymmetricFactorization>,
}

impl Descent for NewtonDescent {
    fn direction(&mut self, problem: &ControlProblem, eval: &Evaluation) -> Result<Control> {
        match &self.factorization {
            Some(h) => Ok(eval.gradient.iter().map(|g| h.solve(g).into_iter().map(|v| -v).collect()).collect()),
            None => eval
                .gradient
                .iter()
                .map(|g| {
                    let x = conjugate_gradient(|v| problem.hessian_apply(v), g, 1e-12, 10 * problem.dim())?;
                    Ok(x.into_iter().map(|v| -v).collect())
                })
                .collect(),
        }
    }

    fn initial_step(&mut self, _slope: f64) -> f64 {
        1.0
    }
}

impl Optimizer for Newton {
    fn name(&self) -> &'static str {
        "newton"
    }

    fn run(&self, problem: &ControlProblem, initial: Control) -> Result<OptimizationTrace> {
        let factorization = if problem.has_dense_maps() {
            Some(factorize_spd(&problem.hessian()?.matrix)?)
        } else {
            None
        };
        descent_loop(self.name(), problem, initial, &mut NewtonDescent { factorization })
    }
}

/// Steepest descent, `d_l = −g_l`, with the Nocedal–Wright initial step
/// `α₀ = α_{k−1} (g_{k−1}ᵀd_{k−1}) / (g_kᵀd_k)` after the first iteration.
pub struct SteepestDescent;

struct SteepestDescentState {
    previous: Option<(f64, f64)>,
}

impl Descent for SteepestDescentState {
    fn direction(&mut self, _problem: &ControlProblem, eval: &Evaluation) -> Result<Control> {
        Ok(negated(&eval.gradient))
    }

    fn initial_step(&mut self, slope: f64) -> f64 {
        match self.previous {
            Some((alpha, prev_slope)) => alpha * prev_slope / slope,
            None => 1.0,
        }
    }

    fn accepted(&mut self, alpha: f64, slope: f64) {
        self.previous = Some((alpha, slope));
    }
}

impl Optimizer for SteepestDescent {
    fn name(&self) -> &'static str {
        "steepest"
    }

    fn run(&self, problem: &ControlProblem, initial: Control) -> Result<OptimizationTrace> {
        descent_loop(self.name(), problem, initial, &mut SteepestDescentState { previous: None })
    }
}

fn negated(g: &Control) -> Control {
    g.iter().map(|v| v.iter().map(|x| -x).collect()).collect()
}

/// Minibatch steepest descent. The first trial step is the minimizer of the
/// minibatch quadratic model, followed by Armijo halving; the accepted step
/// is then scaled by `d / (d + k)` with `d = step_decay`. The full gradient
/// is checked every `check_every` iterations; only those checks are
/// recorded, with `model` holding the minibatch model value.
pub struct StochasticGradient;

impl Optimizer for StochasticGradient {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn run(&self, problem: &ControlProblem, initial: Control) -> Result<OptimizationTrace> {
        let cfg = &problem.config;
        let m = problem.samples();
        let batch = cfg.batch_size.min(m);
        let mut rng = stream(split_seed(cfg.problem.seed, 0x5347_4400));
        let mut f = initial;
        let mut full = problem.evaluate(&f)?;
        let initial_objective = full.objective;
        let threshold = problem.stopping_threshold(full.gradient_norm);
        let mut records = vec![record(0, &full, full.surrogate, 0.0, 0)];
        let mut status = Status::IterationLimit;
        let mut iterations = 0;
        if full.gradient_norm <= threshold {
            status = Status::Converged;
        }
        while status == Status::IterationLimit && iterations < cfg.max_iterations {
            let mut chosen = rand::seq::index::sample(&mut rng, m, batch).into_vec();
            chosen.sort_unstable();
            let eb = problem.evaluate_subset(&f, &chosen)?;
            let d = negated(&eb.gradient);
            let slope = inner(&eb.gradient, &d);
            let curv = problem.curvature(&d, &chosen)?;
            if !(slope < 0.0 && curv > 0.0) {
                status = Status::LineSearchFailed;
                break;
            }
            let phi0 = eb.surrogate;
            let model = |a: f64| phi0 + a * slope + 0.5 * a * a * curv;
            let Some(found) = armijo(model, slope, -slope / curv, 1e-4, cfg.max_line_search) else {
                status = Status::LineSearchFailed;
                break;
            };
            let alpha = found.alpha * cfg.step_decay / (cfg.step_decay + iterations as f64);
            f = step(&f, alpha, &d);
            iterations += 1;
            if iterations % cfg.check_every == 0 || iterations == cfg.max_iterations {
                full = problem.evaluate(&f)?;
                records.push(record(iterations, &full, model(alpha), alpha, found.trials));
                if full.gradient_norm <= threshold {
                    status = Status::Converged;
                }
            }
        }
        if records.last().map(|r| r.iteration) != Some(iterations) {
            full = problem.evaluate(&f)?;
            records.push(record(iterations, &full, full.surrogate, 0.0, 0));
        }
        Ok(OptimizationTrace {
            optimizer: self.name().to_string(),
            status,
            iterations,
            threshold,
            initial_objective,
            final_objective: full.objective,
            final_gradient_norm: full.gradient_norm,
            records,
            control: f,
        })
    }
}

/// Conjugate gradients for an SPD operator, stopping at relative residual `tol`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LrnsError::NotPositiveDefinite { index: 0, pivot: pap });
        }
        let alpha = rr / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    Ok(x)
}

/// Built-in optimizers: `newton`, `steepest` and `sgd`.
pub fn optimizers() -> Registry<dyn Optimizer> {
    let mut reg: Registry<dyn Optimizer> = Registry::new("optimizer");
    reg.register("newton", Arc::new(Newton));
    reg.register("steepest", Arc::new(SteepestDescent));
    reg.register("sgd", Arc::new(StochasticGradient));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(mode: GradientMode) -> ControlConfig {
        ControlConfig {
            problem: DiffusionConfig {
                cells: 4,
                steps: 5,
                final_time: 0.05,
                samples: 6,
                kl_terms: 4,
                sigma: 0.2,
                tau: 1.0,
                neumann_terms: 20,
                ..ControlConfig::default().problem
            },
            gradient_mode: mode,
            ..ControlConfig::default()
        }
    }

    fn pattern(p: &ControlProblem, seed: u64) -> Control {
        let mut g = crate::rng::Gaussian::new(seed);
        (0..p.steps())
            .map(|_| {
                let mut v = vec![0.0; p.dim()];
                g.fill(&mut v);
                v
            })
            .collect()
    }

    fn fd_check(mode: GradientMode) {
        let p = ControlProblem::build(&tiny(mode)).unwrap();
        let f = pattern(&p, 1);
        let e = p.evaluate(&f).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for l in 0..p.steps() {
            for i in 0..p.dim() {
                let mut plus = f.clone();
                let mut minus = f.clone();
                plus[l][i] += h;
                minus[l][i] -= h;
                let fd = (p.surrogate_objective(&f, &plus).unwrap() - p.surrogate_objective(&f, &minus).unwrap()) / (2.0 * h);
                worst = worst.max((fd - e.gradient[l][i]).abs() / e.gradient[l][i].abs().max(1e-12));
            }
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn gradient_matches_surrogate_differences() {
        fd_check(GradientMode::FrozenState);
        fd_check(GradientMode::Literal);
    }

    #[test]
    fn surrogate_agrees_with_objective_at_the_frozen_point() {
        let p = ControlProblem::build(&tiny(GradientMode::FrozenState)).unwrap();
        let f = pattern(&p, 2);
        let e = p.evaluate(&f).unwrap();
        let s = p.surrogate_objective(&f, &f).unwrap();
        assert!((s - e.objective).abs() <= 1e-14 * e.objective);
    }

    #[test]
    fn hessian_is_symmetric_definite_and_matches_products() {
        let p = ControlProblem::build(&tiny(GradientMode::FrozenState)).unwrap();
        let h = p.hessian().unwrap();
        assert!(h.raw_asymmetry <= 1e-10 * h.matrix.max_abs());
        factorize_spd(&h.matrix).unwrap();
        let x = pattern(&p, 3).remove(0);
        let direct = h.matrix.matvec(&x);
        let applied = p.hessian_apply(&x).unwrap();
        for (a, b) in direct.iter().zip(&applied) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-6));
        }
        assert_eq!(p.hessian().unwrap().matrix, h.matrix);
    }

    #[test]
    fn curvature_is_second_difference_of_surrogate() {
        let p = ControlProblem::build(&tiny(GradientMode::FrozenState)).unwrap();
        let f = pattern(&p, 4);
        let d = pattern(&p, 5);
        let all: Vec<usize> = (0..p.samples()).collect();
        let c = p.curvature(&d, &all).unwrap();
        let s = |a: f64| p.surrogate_objective(&f, &step(&f, a, &d)).unwrap();
        let second = s(1.0) - 2.0 * s(0.0) + s(-1.0);
        assert!((second - c).abs() <= 1e-9 * c, "{second} {c}");
    }

    #[test]
    fn matrix_free_maps_agree_with_dense() {
        let dense = ControlProblem::build(&tiny(GradientMode::FrozenState)).unwrap();
        let free = ControlProblem::build(&ControlConfig {
            dense_budget_bytes: 0,
            ..tiny(GradientMode::FrozenState)
        })
        .unwrap();
        assert!(dense.has_dense_maps() && !free.has_dense_maps());
        let f = pattern(&dense, 6);
        let a = dense.evaluate(&f).unwrap();
        let b = free.evaluate(&f).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-12 * a.objective);
        assert!((a.gradient_norm - b.gradient_norm).abs() <= 1e-10 * a.gradient_norm);
    }

    #[test]
    fn optimizers_reduce_objective() {
        let cfg = ControlConfig {
            max_iterations: 200,
            batch_size: 3,
            check_every: 2,
            ..tiny(GradientMode::FrozenState)
        };
        let p = ControlProblem::build(&cfg).unwrap();
        for name in ["newton", "steepest", "sgd"] {
            let t = optimizers().get(name).unwrap().run(&p, p.zero_control()).unwrap();
            assert!(t.final_objective < t.initial_objective, "{name}");
            assert_eq!(t.status, Status::Converged, "{name}");
            if name != "sgd" {
                assert_eq!(t.model_increases(), 0, "{name}");
            }
        }
    }

    #[test]
    fn zero_target_and_zero_start_is_stationary() {
        let cfg = ControlConfig {
            target: "zero".into(),
            problem: DiffusionConfig {
                initial: "zero".into(),
                ..tiny(GradientMode::FrozenState).problem
            },
            ..tiny(GradientMode::FrozenState)
        };
        let p = ControlProblem::build(&cfg).unwrap();
        let t = Newton.run(&p, p.zero_control()).unwrap();
        assert_eq!(t.status, Status::Converged);
        assert_eq!(t.iterations, 0);
        assert_eq!(t.final_objective, 0.0);
    }

    #[test]
    fn larger_beta_shrinks_the_control() {
        let norm = |beta: f64| {
            let p = ControlProblem::build(&ControlConfig {
                beta,
                ..tiny(GradientMode::FrozenState)
            })
            .unwrap();
            let t = Newton.run(&p, p.zero_control()).unwrap();
            inner(&t.control, &t.control)
        };
        assert!(norm(1e-1) < norm(1e-3));
    }

    #[test]
    fn optimal_value_grows_with_beta() {
        let value = |beta: f64| {
            let p = ControlProblem::build(&ControlConfig {
                beta,
                ..tiny(GradientMode::FrozenState)
            })
            .unwrap();
            Newton.run(&p, p.zero_control()).unwrap().final_objective
        };
        assert!(value(2e-3) >= value(1e-3));
    }

    #[test]
    fn scalar_system_matches_hand_arithmetic() {
        // One interior node with σ = 0: Z = g / k̄ and H = Δt z² g + βΔt g.
        let cfg = ControlConfig {
            problem: DiffusionConfig {
                cells: 2,
                steps: 1,
                final_time: 0.1,
                samples: 1,
                kl_terms: 1,
                sigma: 0.0,
                ..ControlConfig::default().problem
            },
            ..ControlConfig::default()
        };
        let p = ControlProblem::build(&cfg).unwrap();
        let g = p.mass.get(0, 0);
        let a = assemble_stiffness(&p.mesh, Coefficient::Constant(1.0)).unwrap();
        let k = g / 0.1 + p.dofs.restrict_matrix(&a).unwrap().get(0, 0);
        let z = g / k;
        assert!((p.apply_state_map(0, &[1.0])[0] - z).abs() <= 1e-15);
        let h = p.hessian().unwrap().matrix[(0, 0)];
        assert!((h - (0.1 * z * z * g + 1e-3 * 0.1 * g)).abs() <= 1e-15 * h.abs().max(1e-300) + 1e-20);
    }

    #[test]
    fn wolfe_on_quadratic_returns_minimizer() {
        let phi = |a: f64| ((a - 3.0).powi(2), 2.0 * (a - 3.0));
        let out = strong_wolfe(phi, 1.0, &WolfeParams { c2: 0.1, ..WolfeParams::default() }).unwrap();
        assert!((out.alpha - 3.0).abs() < 1e-12);
        let rosen = |a: f64| {
            let x = -1.2 + a;
            let y = 1.0 + a;
            let v = 100.0 * (y - x * x).powi(2) + (1.0 - x).powi(2);
            let dv = 200.0 * (y - x * x) * (1.0 - 2.0 * x) - 2.0 * (1.0 - x);
            (v, dv)
        };
        let p = WolfeParams::default();
        let (v0, d0) = rosen(0.0);
        let out = strong_wolfe(rosen, 1.0, &p).unwrap();
        let (v, d) = rosen(out.alpha);
        assert!(v <= v0 + p.c1 * out.alpha * d0 && d.abs() <= -p.c2 * d0);
        assert!(strong_wolfe(|a| (a, 1.0), 1.0, &p).is_none());
    }

    #[test]
    fn armijo_halves_until_decrease() {
        let out = armijo(|a| (a - 1.0).powi(2), -2.0, 8.0, 1e-4, 20).unwrap();
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.trials, 4);
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = crate::linalg::random_spd(6, 9);
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let x = conjugate_gradient(|v| Ok(a.matvec(v)), &b, 1e-14, 100).unwrap();
        let r: Vec<f64> = a.matvec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(dot(&r, &r).sqrt() <= 1e-10);
    }

    #[test]
    fn nonzero_boundary_is_rejected() {
        let cfg = ControlConfig {
            problem: DiffusionConfig {
                boundary: "one".into(),
                ..tiny(GradientMode::FrozenState).problem
            },
            ..tiny(GradientMode::FrozenState)
        };
        let err = ControlProblem::build(&cfg).err().unwrap();
        assert_eq!(err.field_path(), Some("problem.boundary"));
    }
}
