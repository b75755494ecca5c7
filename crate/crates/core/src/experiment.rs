//! Experiment configuration files, pipelines and run manifests.
//!
//! A pipeline turns an [`ExperimentConfig`] into named artifacts (CSV, JSON
//! and binary matrices). [`execute`] keeps them in memory; [`run`] writes
//! them into the output directory together with `run_manifest.json`. Wall
//! clock timings only ever go into the manifest, so every other artifact is
//! a pure function of the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{optimizers, ControlConfig, ControlProblem, OptimizationTrace};
use crate::diffusion::{
    compression_rank, diffusion_solvers, qoi_error, scan_sigma, scan_tau, timed, write_sigma_csv, write_tau_csv,
    DiffusionConfig, DiffusionProblem, RandomOperators, Timing,
};
use crate::error::{invalid, LrnsError, Result};
use crate::fem::{build_mesh, DofMap};
use crate::io::{fmt_f64, matrix_bytes, CollectionManifest};
use crate::lowrank::{basis_finders, compress_basis_rank, compression_report, LowRankFactors};
use crate::verify::{run_suite, write_checks_csv, Check, VerifyConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Hex SHA-256 of the compact JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    SolveDiffusion,
    SolveControl,
    Compress,
    ScanTau,
    ScanSigma,
    Verify,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SolveDiffusion => "solve-diffusion",
            Self::SolveControl => "solve-control",
            Self::Compress => "compress",
            Self::ScanTau => "scan-tau",
            Self::ScanSigma => "scan-sigma",
            Self::Verify => "verify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Neumann truncation indices of the σ scan.
    pub terms: Vec<usize>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.3, 0.5, 0.88, 1.0],
            sigmas: vec![0.1, 0.2, 0.5],
            terms: vec![0, 5, 15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    /// Also emit the basis and the per-sample factors as binary matrices.
    pub write_factors: bool,
    pub with_rmsre: bool,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            write_factors: false,
            with_rmsre: true,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_solvers() -> Vec<String> {
    vec!["reference".into(), "lrns".into()]
}

/// One experiment. Only the sections used by `pipeline` matter; the others
/// keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineKind,
    /// Overrides the seeds of the `diffusion` and `control` sections.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub control: ControlConfig,
    /// Solvers run by `solve-diffusion`, by registry name.
    #[serde(default = "default_solvers")]
    pub solvers: Vec<String>,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub compress: CompressConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn new(pipeline: PipelineKind) -> Self {
        Self {
            pipeline,
            seed: None,
            out: default_out(),
            diffusion: DiffusionConfig::default(),
            control: ControlConfig::default(),
            solvers: default_solvers(),
            scan: ScanConfig::default(),
            compress: CompressConfig::default(),
            verify: VerifyConfig::default(),
        }
    }

    /// Parses JSON; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let error = Box::new(LrnsError::Json(e.into_inner()));
            if path == "." {
                *error
            } else {
                LrnsError::Field { path, error }
            }
        })?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Pushes the master seed into the sections and validates the result.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.diffusion.seed = seed;
            self.control.problem.seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    /// Replaces the compression ratio of both problem sections.
    pub fn set_tau(&mut self, tau: f64) {
        self.diffusion.tau = tau;
        self.control.problem.tau = tau;
    }

    pub fn validate(&self) -> Result<()> {
        match self.pipeline {
            PipelineKind::SolveDiffusion => {
                self.diffusion.validate().map_err(|e| e.at("diffusion"))?;
                if self.solvers.is_empty() {
                    return Err(invalid("solvers", "at least one solver is required"));
                }
                let reg = diffusion_solvers();
                for name in &self.solvers {
                    reg.get(name).map_err(|e| e.at("solvers"))?;
                }
            }
            PipelineKind::SolveControl => self.control.validate().map_err(|e| e.at("control"))?,
            PipelineKind::Compress => self.diffusion.validate().map_err(|e| e.at("diffusion"))?,
            PipelineKind::ScanTau => {
                self.diffusion.validate().map_err(|e| e.at("diffusion"))?;
                check_list("taus", &self.scan.taus, |t| t > 0.0 && t <= 1.0).map_err(|e| e.at("scan"))?;
            }
            PipelineKind::ScanSigma => {
                self.diffusion.validate().map_err(|e| e.at("diffusion"))?;
                check_list("sigmas", &self.scan.sigmas, |s| (0.0..=1.0).contains(&s)).map_err(|e| e.at("scan"))?;
                if self.scan.terms.is_empty() {
                    return Err(invalid("terms", "at least one value is required").at("scan"));
                }
            }
            PipelineKind::Verify => self.verify.validate().map_err(|e| e.at("verify"))?,
        }
        Ok(())
    }
}

fn check_list(name: &'static str, values: &[f64], ok: impl Fn(f64) -> bool) -> Result<()> {
    if values.is_empty() {
        return Err(invalid(name, "at least one value is required"));
    }
    if let Some(v) = values.iter().find(|v| !ok(**v)) {
        return Err(invalid(name, format!("value {v} is out of range")));
    }
    Ok(())
}

/// A named output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn text(name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Self> {
        let mut bytes = Vec::new();
        body(&mut bytes)?;
        Ok(Self {
            name: name.to_string(),
            bytes,
        })
    }

    fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Self {
            name: name.to_string(),
            bytes,
        })
    }
}

/// In-memory result of a pipeline.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<Timing>,
    pub seeds: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    /// Verification checks, for the `verify` pipeline.
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub config_hash: String,
    /// `lrns-<version>+<first 12 hash digits>`.
    pub artifact_version: String,
    pub module_versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub timings: Vec<Timing>,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, outcome: &Outcome) -> Self {
        let hash = config_hash(config);
        let module_versions = [
            "linalg", "lowrank", "neumann", "fem", "randfield", "diffusion", "control", "experiment",
        ]
        .iter()
        .map(|m| (m.to_string(), VERSION.to_string()))
        .collect();
        Self {
            pipeline: config.pipeline.name().to_string(),
            artifact_version: format!("lrns-{VERSION}+{}", &hash[..12]),
            config_hash: hash,
            module_versions,
            seeds: outcome.seeds.clone(),
            threads: rayon::current_num_threads(),
            timings: outcome.timings.clone(),
            artifacts: outcome.artifacts.iter().map(|a| a.name.clone()).collect(),
            warnings: outcome.warnings.clone(),
        }
    }
}

/// Runs the pipeline and writes its artifacts and manifest under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<(Outcome, RunManifest)> {
    let outcome = execute(config)?;
    let manifest = RunManifest::new(config, &outcome);
    write_outcome(&config.out, &outcome, &manifest)?;
    Ok((outcome, manifest))
}

pub fn write_outcome(dir: &Path, outcome: &Outcome, manifest: &RunManifest) -> Result<()> {
    for a in &outcome.artifacts {
        let path = dir.join(&a.name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &a.bytes)?;
    }
    fs::create_dir_all(dir)?;
    crate::io::write_json(&dir.join(MANIFEST_NAME), manifest)
}

/// Runs the pipeline in memory.
pub fn execute(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    match config.pipeline {
        PipelineKind::SolveDiffusion => solve_diffusion(config),
        PipelineKind::SolveControl => solve_control(config),
        PipelineKind::Compress => compress(config),
        PipelineKind::ScanTau => tau_scan(config),
        PipelineKind::ScanSigma => sigma_scan(config),
        PipelineKind::Verify => verify(config),
    }
}

fn diffusion_seeds(cfg: &DiffusionConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("samples".to_string(), cfg.seed),
        ("sketch".to_string(), cfg.sketch().seed),
    ])
}

fn guard_warning(label: &str, report: &crate::neumann::SolveReport) -> Option<String> {
    if report.divergence_warning {
        Some(format!(
            "{label}: spectral-norm estimate {} reaches 1 in {} sample(s); the series may diverge",
            report.rho_max,
            report.rho.iter().filter(|r| **r >= 1.0).count()
        ))
    } else if !report.violations.is_empty() {
        Some(format!(
            "{label}: {} sample(s) at or above the guard threshold {}",
            report.violations.len(),
            report.threshold
        ))
    } else {
        None
    }
}

#[derive(Serialize)]
struct SolverSummary {
    solver: String,
    basis_rank: Option<usize>,
    rho_max: Option<f64>,
    divergence_warning: bool,
    error_vs_reference: Option<f64>,
}

#[derive(Serialize)]
struct DiffusionSummary {
    config_hash: String,
    nodes: usize,
    interior: usize,
    samples: usize,
    steps: usize,
    ellipticity_min: f64,
    ellipticity_max: f64,
    redraws: usize,
    solvers: Vec<SolverSummary>,
}

fn solve_diffusion(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.diffusion;
    let mut out = Outcome {
        seeds: diffusion_seeds(cfg),
        ..Outcome::default()
    };
    let problem = timed(&mut out.timings, "build", || DiffusionProblem::build(cfg))?;
    let reg = diffusion_solvers();
    let mut runs = Vec::new();
    for name in &config.solvers {
        let mut run = reg.get(name)?.solve(&problem)?;
        out.timings.append(&mut run.timings);
        out.artifacts.push(Artifact::text(&format!("qoi_{name}.csv"), |w| {
            run.trajectory.write_csv(&problem.mesh, w)
        })?);
        if let Some(w) = run.report.as_ref().and_then(|r| guard_warning(name, r)) {
            out.warnings.push(w);
        }
        runs.push((name.clone(), run));
    }
    let reference = runs.iter().find(|(n, _)| n == "reference").map(|(_, r)| r.trajectory.clone());
    let solvers = runs
        .iter()
        .map(|(name, run)| {
            Ok(SolverSummary {
                solver: name.clone(),
                basis_rank: run.rank,
                rho_max: run.report.as_ref().map(|r| r.rho_max),
                divergence_warning: run.report.as_ref().is_some_and(|r| r.divergence_warning),
                error_vs_reference: match &reference {
                    Some(r) if name != "reference" => {
                        Some(qoi_error(&run.trajectory, r, &problem.mass, problem.dt())?)
                    }
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = DiffusionSummary {
        config_hash: config_hash(config),
        nodes: problem.mesh.num_nodes(),
        interior: problem.num_interior(),
        samples: problem.samples(),
        steps: problem.steps(),
        ellipticity_min: problem.ellipticity.min,
        ellipticity_max: problem.ellipticity.max,
        redraws: problem.redraws,
        solvers,
    };
    out.artifacts.push(Artifact::json("summary.json", &summary)?);
    Ok(out)
}

#[derive(Serialize)]
struct ControlSummary<'a> {
    config_hash: String,
    optimizer: &'a str,
    status: crate::control::Status,
    iterations: usize,
    initial_objective: f64,
    final_objective: f64,
    ratio: f64,
    final_gradient_norm: f64,
    threshold: f64,
    objective_increases: usize,
    model_increases: usize,
    rho_max: f64,
    gradient_mode: crate::control::GradientMode,
}

/// Builds the control problem and runs the configured optimizer from zero.
pub fn optimize(config: &ControlConfig) -> Result<(ControlProblem, OptimizationTrace)> {
    let problem = ControlProblem::build(config)?;
    let trace = optimizers().get(&config.optimizer)?.run(&problem, problem.zero_control())?;
    Ok((problem, trace))
}

fn solve_control(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.control;
    let mut out = Outcome {
        seeds: diffusion_seeds(&cfg.problem),
        ..Outcome::default()
    };
    out.seeds.insert("sgd".into(), crate::rng::split_seed(cfg.problem.seed, 0x5347_4400));
    let problem = timed(&mut out.timings, "build", || ControlProblem::build(cfg))?;
    if let Some(w) = guard_warning("control", &problem.report) {
        out.warnings.push(w);
    }
    let optimizer = optimizers().get(&cfg.optimizer)?;
    let trace = timed(&mut out.timings, "optimize", || optimizer.run(&problem, problem.zero_control()))?;
    if trace.status != crate::control::Status::Converged {
        out.warnings.push(format!("optimizer stopped with status {:?}", trace.status));
    }
    out.artifacts.push(Artifact::text("trace.csv", |w| trace.write_csv(w))?);
    out.artifacts
        .push(Artifact::text("control.csv", |w| problem.write_control_csv(&trace.control, w))?);
    let means = timed(&mut out.timings, "mean-states", || problem.mean_states(&trace.control))?;
    out.artifacts.push(Artifact::text("mean_state.csv", |w| {
        use std::io::Write;
        writeln!(w, "t,x,y,value")?;
        let zeros = vec![0.0; problem.dofs.boundary().len()];
        for (l, u) in means.iter().enumerate() {
            let t = fmt_f64(l as f64 * problem.dt());
            let full = problem.dofs.extend(u, &zeros);
            for (p, v) in problem.mesh.coords().iter().zip(&full) {
                writeln!(w, "{t},{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v))?;
            }
        }
        Ok(())
    })?);
    let summary = ControlSummary {
        config_hash: config_hash(config),
        optimizer: &trace.optimizer,
        status: trace.status,
        iterations: trace.iterations,
        initial_objective: trace.initial_objective,
        final_objective: trace.final_objective,
        ratio: trace.ratio(),
        final_gradient_norm: trace.final_gradient_norm,
        threshold: trace.threshold,
        objective_increases: trace.increases(),
        model_increases: trace.model_increases(),
        rho_max: problem.report.rho_max,
        gradient_mode: cfg.gradient_mode,
    };
    out.artifacts.push(Artifact::json("summary.json", &summary)?);
    Ok(out)
}

#[derive(Serialize)]
struct CompressSummary {
    config_hash: String,
    nodes: usize,
    dim: usize,
    samples: usize,
    tau: f64,
    /// `⌈τN⌉` over all mesh nodes.
    rank: usize,
    basis_rank: usize,
    rmsre: Option<f64>,
    relative_rmsre: Option<f64>,
    energy: f64,
    storage_floats: usize,
}

fn compress(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.diffusion;
    let mut out = Outcome {
        seeds: diffusion_seeds(cfg),
        ..Outcome::default()
    };
    let mesh = build_mesh(cfg.cells)?;
    let dofs = DofMap::new(&mesh);
    let random = timed(&mut out.timings, "sample", || RandomOperators::build(cfg, &mesh, &dofs, false))?;
    let coll = &random.perturbations;
    let (rank, width) = compression_rank(cfg.tau, mesh.num_nodes(), coll.dim())?;
    let finder = basis_finders().get(&cfg.basis_finder)?;
    let factors = timed(&mut out.timings, "compress", || {
        let basis = compress_basis_rank(coll, width, &cfg.sketch(), finder.as_ref())?;
        LowRankFactors::from_basis(basis, coll, cfg.tau)
    })?;
    let report = timed(&mut out.timings, "report", || {
        compression_report(coll, &factors, config.compress.with_rmsre)
    })?;
    out.artifacts.push(Artifact::text("energy.csv", |w| {
        use std::io::Write;
        writeln!(w, "k,eigenvalue,energy")?;
        let profile = crate::lowrank::EnergyProfile::new(&report.gram_eigenvalues)?;
        for (i, l) in report.gram_eigenvalues.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, fmt_f64(*l), fmt_f64(profile.at_rank(i + 1)))?;
        }
        Ok(())
    })?);
    let scale = coll.frobenius_scale();
    out.artifacts.push(Artifact::json(
        "compression.json",
        &CompressSummary {
            config_hash: config_hash(config),
            nodes: mesh.num_nodes(),
            dim: report.dim,
            samples: report.samples,
            tau: cfg.tau,
            rank,
            basis_rank: report.rank,
            rmsre: report.rmsre,
            relative_rmsre: report.rmsre.map(|r| if scale > 0.0 { r / scale } else { 0.0 }),
            energy: report.energy,
            storage_floats: report.storage_floats,
        },
    )?);
    if config.compress.write_factors {
        out.artifacts.push(Artifact {
            name: "factors/basis.bin".into(),
            bytes: matrix_bytes(&factors.basis),
        });
        let mut names = Vec::with_capacity(factors.len());
        for (m, v) in factors.factors.iter().enumerate() {
            let name = format!("member_{m:05}.bin");
            out.artifacts.push(Artifact {
                name: format!("factors/{name}"),
                bytes: matrix_bytes(v),
            });
            names.push(name);
        }
        out.artifacts.push(Artifact::json(
            &format!("factors/{}", crate::io::MANIFEST),
            &CollectionManifest { members: names },
        )?);
    }
    Ok(out)
}

fn tau_scan(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.diffusion;
    let mut out = Outcome {
        seeds: diffusion_seeds(cfg),
        ..Outcome::default()
    };
    let problem = timed(&mut out.timings, "build", || DiffusionProblem::build(cfg))?;
    let reference = timed(&mut out.timings, "reference-solve", || {
        problem.mean_trajectory("reference", |m| problem.reference_states(m))
    })?;
    let rows = scan_tau(&problem, &reference, &config.scan.taus)?;
    for r in &rows {
        out.timings.push(Timing {
            phase: format!("lrns tau={}", r.tau),
            seconds: r.seconds,
        });
        if r.rho_max >= 1.0 {
            out.warnings.push(format!("tau={}: spectral-norm estimate {} reaches 1", r.tau, r.rho_max));
        }
    }
    out.artifacts.push(Artifact::text("tau.csv", |w| write_tau_csv(&rows, w))?);
    Ok(out)
}

fn sigma_scan(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.diffusion;
    let mut out = Outcome {
        seeds: diffusion_seeds(cfg),
        ..Outcome::default()
    };
    let rows = timed(&mut out.timings, "scan", || {
        scan_sigma(cfg, &config.scan.sigmas, &config.scan.terms)
    })?;
    for r in rows.iter().filter(|r| r.rho_max >= 1.0 && r.terms == config.scan.terms[0]) {
        out.warnings.push(format!("sigma={}: spectral-norm estimate {} reaches 1", r.sigma, r.rho_max));
    }
    out.artifacts.push(Artifact::text("sigma.csv", |w| write_sigma_csv(&rows, w))?);
    Ok(out)
}

fn verify(config: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let checks = timed(&mut out.timings, "verify", || run_suite(&config.verify))?;
    out.artifacts.push(Artifact::text("verify.csv", |w| write_checks_csv(&checks, w))?);
    out.artifacts.push(Artifact::json("verify.json", &checks)?);
    out.checks = checks;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_diffusion() -> DiffusionConfig {
        DiffusionConfig {
            cells: 4,
            steps: 4,
            samples: 6,
            kl_terms: 4,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::new(PipelineKind::ScanTau);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.diffusion.sigma = 0.3;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn parse_errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"pipeline": "scan-tau", "diffusion": {"sigma": "x"}}"#).unwrap_err();
        assert_eq!(err.field_path(), Some("diffusion.sigma"));
        let err = ExperimentConfig::from_json(r#"{"pipeline": "scan-tau", "diffusion": {"sigmaa": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("sigmaa"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"pipeline": "bake"}"#).unwrap_err();
        assert!(err.to_string().contains("bake"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"pipeline": "solve-diffusion", "diffusion": {"initial": "nope"}}"#)
            .unwrap_err();
        assert_eq!(err.field_path(), Some("diffusion.initial"));
        let err = ExperimentConfig::from_json(r#"{"pipeline": "solve-control", "control": {"optimizer": "adam"}}"#)
            .unwrap_err();
        assert_eq!(err.field_path(), Some("control.optimizer"));
        let err = ExperimentConfig::from_json(r#"{"pipeline": "scan-tau", "diffusion": {"tau": 2.0}}"#).unwrap_err();
        assert_eq!(err.field_path(), Some("diffusion.tau"));
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn master_seed_reaches_both_sections() {
        let cfg = ExperimentConfig::from_json(r#"{"pipeline": "compress", "seed": 5}"#).unwrap();
        assert_eq!((cfg.diffusion.seed, cfg.control.problem.seed), (5, 5));
    }

    #[test]
    fn tau_scan_lists_node_ranks() {
        let mut cfg = ExperimentConfig::new(PipelineKind::ScanTau);
        cfg.diffusion = small_diffusion();
        cfg.scan.taus = vec![1.0, 0.5];
        let out = execute(&cfg).unwrap();
        let csv = String::from_utf8(out.artifact("tau.csv").unwrap().bytes.clone()).unwrap();
        let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(ks, ["25", "13"]);
    }

    #[test]
    fn zero_sigma_diffusion_is_deterministic() {
        let mut cfg = ExperimentConfig::new(PipelineKind::SolveDiffusion);
        cfg.diffusion = DiffusionConfig {
            sigma: 0.0,
            ..small_diffusion()
        };
        let a = execute(&cfg).unwrap();
        let b = execute(&cfg).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        let names: Vec<&str> = a.artifacts.iter().map(|x| x.name.as_str()).collect();
        assert_eq!(names, ["qoi_reference.csv", "qoi_lrns.csv", "summary.json"]);
        let summary: serde_json::Value = serde_json::from_slice(&a.artifact("summary.json").unwrap().bytes).unwrap();
        assert!(summary["solvers"][1]["error_vs_reference"].as_f64().unwrap() < 1e-12);
    }

    #[test]
    fn compress_writes_loadable_factors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(PipelineKind::Compress);
        cfg.diffusion = DiffusionConfig {
            tau: 0.3,
            ..small_diffusion()
        };
        cfg.compress.write_factors = true;
        cfg.out = dir.path().to_path_buf();
        let (out, manifest) = run(&cfg).unwrap();
        let factors = crate::io::read_collection(&dir.path().join("factors")).unwrap();
        assert_eq!(factors.len(), 6);
        // 25 nodes at τ = 0.3 give k = 8 over 9 interior unknowns.
        assert_eq!(factors[0].shape(), (9, 8));
        let summary: serde_json::Value =
            serde_json::from_slice(&out.artifact("compression.json").unwrap().bytes).unwrap();
        assert_eq!(summary["storage_floats"], 7 * 9 * 8);
        assert_eq!(manifest.config_hash, config_hash(&cfg));
        assert!(dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn control_pipeline_emits_trace_and_fields() {
        let mut cfg = ExperimentConfig::new(PipelineKind::SolveControl);
        cfg.control.problem = DiffusionConfig {
            initial: "sin2pix-sinpiy".into(),
            source: "zero".into(),
            ..small_diffusion()
        };
        let out = execute(&cfg).unwrap();
        let trace = String::from_utf8(out.artifact("trace.csv").unwrap().bytes.clone()).unwrap();
        assert!(trace.starts_with("iteration,objective,model,gradient_norm,step,trials\n"));
        let mean = String::from_utf8(out.artifact("mean_state.csv").unwrap().bytes.clone()).unwrap();
        assert_eq!(mean.lines().count(), 1 + 5 * 25);
        let control = String::from_utf8(out.artifact("control.csv").unwrap().bytes.clone()).unwrap();
        assert_eq!(control.lines().count(), 1 + 4 * 25);
    }
}
