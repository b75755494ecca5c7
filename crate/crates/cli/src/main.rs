//! `lrns`: runs solver pipelines from JSON configuration files.
//!
//! Every subcommand reads an optional `--config` file. The file may omit
//! `pipeline`; if present it must name the subcommand. Flags override
//! single scalar fields only.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrns_core::experiment::{run, ExperimentConfig, PipelineKind, MANIFEST_NAME};
use lrns_core::verify::SuiteSize;

#[derive(Parser)]
#[command(name = "lrns", version, about = "Low-rank + Neumann-series solvers for stochastic diffusion and its control")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "LRNS_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Mean trajectory of the stochastic diffusion problem.
    SolveDiffusion(Common),
    /// Distributed optimal control under the stochastic state equation.
    SolveControl(Common),
    /// Compress the perturbation matrices and report the energy spectrum.
    Compress(Common),
    /// LRNS error against the reference over compression ratios.
    ScanTau(Common),
    /// LRNS error over perturbation scales and truncation indices.
    ScanSigma(Common),
    /// Run the oracle checks; exits nonzero if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// `quick` or `full` problem sizes.
        #[arg(long)]
        size: Option<String>,
        /// Multiplies every check tolerance.
        #[arg(long)]
        tolerance_scale: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for sampling and sketching.
    #[arg(long)]
    seed: Option<u64>,
    /// Compression ratio in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(kind: PipelineKind, common: &Common) -> Result<ExperimentConfig> {
    let mut value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => serde_json::json!({}),
    };
    let Some(obj) = value.as_object_mut() else {
        bail!("configuration must be a JSON object");
    };
    match obj.get("pipeline").and_then(|p| p.as_str()) {
        Some(p) if p != kind.name() => bail!("configuration is for `{p}`, not `{}`", kind.name()),
        _ => {
            obj.insert("pipeline".into(), kind.name().into());
        }
    }
    if let Some(seed) = common.seed {
        obj.insert("seed".into(), seed.into());
    }
    if let Some(out) = &common.out {
        obj.insert("out".into(), out.to_string_lossy().into_owned().into());
    }
    let mut cfg = ExperimentConfig::from_json(&value.to_string())?;
    if let Some(tau) = common.tau {
        cfg.set_tau(tau);
        cfg = cfg.resolved()?;
    }
    Ok(cfg)
}

fn configure(command: &Command) -> Result<ExperimentConfig> {
    Ok(match command {
        Command::SolveDiffusion(c) => load(PipelineKind::SolveDiffusion, c)?,
        Command::SolveControl(c) => load(PipelineKind::SolveControl, c)?,
        Command::Compress(c) => load(PipelineKind::Compress, c)?,
        Command::ScanTau(c) => load(PipelineKind::ScanTau, c)?,
        Command::ScanSigma(c) => load(PipelineKind::ScanSigma, c)?,
        Command::Verify {
            common,
            size,
            tolerance_scale,
        } => {
            let mut cfg = load(PipelineKind::Verify, common)?;
            if let Some(size) = size {
                cfg.verify.size = match size.as_str() {
                    "quick" => SuiteSize::Quick,
                    "full" => SuiteSize::Full,
                    other => bail!("unknown suite size `{other}` (expected quick or full)"),
                };
            }
            if let Some(scale) = tolerance_scale {
                cfg.verify.tolerance_scale = *scale;
            }
            cfg.resolved()?
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = configure(&cli.command)?;
    let (outcome, manifest) = run(&cfg)?;
    for check in &outcome.checks {
        println!("{}", check.line());
    }
    for a in &outcome.artifacts {
        println!("wrote {}", cfg.out.join(&a.name).display());
    }
    println!("wrote {}", cfg.out.join(MANIFEST_NAME).display());
    for t in &manifest.timings {
        println!("{:>10.3} s  {}", t.seconds, t.phase);
    }
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let failed = outcome.failed_checks();
    if !failed.is_empty() {
        eprintln!("{} check(s) failed: {}", failed.len(), failed.join(", "));
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
