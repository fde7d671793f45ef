//! `fairfed` — experiment runner for fairness-aware classification under
//! federated differential privacy.
//!
//! Subcommands build an [`ExperimentPlan`] and execute it; results land in a
//! per-replicate CSV plus an aggregated CSV with 95% bands. Values resolve
//! in order: built-in defaults, then the `--config` TOML file, then command
//! line flags. `FAIRFED_THREADS` caps the worker pool.

use clap::{Args, Parser, Subcommand};
use fairfed::experiment::{run_plan, ExperimentPlan, PlanMode, PlanTuning, SizeSpec};
use fairfed::NoiseMode;
use serde::Deserialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fairfed",
    version,
    about = "Fairness-aware classification under federated DP"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to CSV.
    Gen(GenArgs),
    /// Monte Carlo oracle baselines on the synthetic population.
    Oracle(OracleArgs),
    /// Single-server sweep (cross-fitted classifier).
    Cdp(SweepArgs),
    /// Federated sweep.
    Fdp(SweepArgs),
    /// Generic sweep; `--mode` picks the pipeline.
    Sweep(FullSweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of records.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated disparity levels.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Monte Carlo sample size.
    #[arg(long)]
    mc_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated disparity levels.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Comma-separated privacy budgets.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Comma-separated total sample sizes (split evenly across sites).
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Number of sites (1 for cdp).
    #[arg(long)]
    sites: Option<usize>,
    /// Replicates per cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Independent test-set size per replicate.
    #[arg(long)]
    test_n: Option<usize>,
    /// Fixed bandwidth (skips cross-validation).
    #[arg(long)]
    h: Option<f64>,
    /// Fixed tree depth (skips the depth rule).
    #[arg(long)]
    depth: Option<usize>,
    /// Selection band half-width.
    #[arg(long)]
    rho_star: Option<f64>,
    /// Monotone-correction constant.
    #[arg(long)]
    c_omega: Option<f64>,
    /// Override the default leakage delta = (N_s/2)^-2.
    #[arg(long)]
    delta: Option<f64>,
    /// Safety margin subtracted from alpha inside the threshold selection.
    #[arg(long)]
    alpha_backoff: Option<f64>,
    /// Re-run bandwidth CV inside every replicate.
    #[arg(long)]
    cv_per_rep: bool,
    /// Disable all noise (test hook).
    #[arg(long)]
    no_noise: bool,
}

#[derive(Args)]
struct FullSweepArgs {
    /// Pipeline to run: cdp or fdp.
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    sweep: SweepArgs,
}

/// Subset of the plan readable from the TOML config file. Sections mirror
/// the library modules.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    experiment: FileExperiment,
    #[serde(default)]
    federation: FileFederation,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileExperiment {
    alphas: Option<Vec<f64>>,
    epsilons: Option<Vec<f64>>,
    sizes: Option<Vec<usize>>,
    sites: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    test_n: Option<usize>,
    gen_n: Option<usize>,
    mc_n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFederation {
    h: Option<f64>,
    depth: Option<usize>,
    rho_star: Option<f64>,
    c_omega: Option<f64>,
    eta_tol: Option<f64>,
    k_eigen: Option<usize>,
    grid_resolution: Option<usize>,
    delta: Option<f64>,
    cv_per_rep: Option<bool>,
    alpha_backoff: Option<f64>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, String> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", p.display()))
        }
    }
}

fn build_sweep_plan(
    mode: PlanMode,
    args: &SweepArgs,
    file: &FileConfig,
) -> Result<ExperimentPlan, String> {
    let fe = &file.experiment;
    let ff = &file.federation;
    let alphas = if args.alpha.is_empty() {
        fe.alphas.clone().unwrap_or_default()
    } else {
        args.alpha.clone()
    };
    let epsilons = if args.eps.is_empty() {
        fe.epsilons.clone().unwrap_or_default()
    } else {
        args.eps.clone()
    };
    let totals = if args.n.is_empty() {
        fe.sizes.clone().unwrap_or_default()
    } else {
        args.n.clone()
    };
    let sites = args
        .sites
        .or(fe.sites)
        .unwrap_or(if mode == PlanMode::Cdp { 1 } else { 2 });
    if sites == 0 {
        return Err("sites must be >= 1".into());
    }
    let sizes = totals
        .iter()
        .map(|&n| {
            if n % sites != 0 {
                return Err(format!("total size {n} does not divide into {sites} sites"));
            }
            Ok(SizeSpec {
                sites,
                site_size: n / sites,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let tuning = PlanTuning {
        h: args.h.or(ff.h),
        depth: args.depth.or(ff.depth),
        rho_star: args.rho_star.or(ff.rho_star).unwrap_or(0.03),
        c_omega: args.c_omega.or(ff.c_omega).unwrap_or(0.1),
        eta_tol: ff.eta_tol.unwrap_or(0.05),
        k_eigen: ff.k_eigen.unwrap_or(35),
        grid_resolution: ff.grid_resolution.unwrap_or(30),
        cv_per_rep: args.cv_per_rep || ff.cv_per_rep.unwrap_or(false),
        delta: args.delta.or(ff.delta),
        alpha_backoff: args.alpha_backoff.or(ff.alpha_backoff).unwrap_or(0.0),
        noise: if args.no_noise {
            NoiseMode::Disabled
        } else {
            NoiseMode::Calibrated
        },
    };
    Ok(ExperimentPlan {
        mode,
        alphas,
        epsilons,
        sizes,
        reps: args.reps.or(fe.reps).unwrap_or(1),
        master_seed: args.seed.or(fe.seed).unwrap_or(0),
        out: args
            .out
            .clone()
            .or_else(|| fe.out.clone())
            .unwrap_or_else(|| PathBuf::from("results.csv")),
        test_n: args.test_n.or(fe.test_n).unwrap_or(4000),
        gen_n: 0,
        mc_n: 0,
        tuning,
    })
}

fn build_plan(cli: &Cli) -> Result<ExperimentPlan, String> {
    let file = load_config(&cli.config)?;
    let fe = &file.experiment;
    match &cli.command {
        Command::Gen(a) => Ok(ExperimentPlan {
            mode: PlanMode::Gen,
            alphas: vec![],
            epsilons: vec![],
            sizes: vec![],
            reps: 1,
            master_seed: a.seed.or(fe.seed).unwrap_or(0),
            out: a
                .out
                .clone()
                .or_else(|| fe.out.clone())
                .unwrap_or_else(|| PathBuf::from("synthetic.csv")),
            test_n: 0,
            gen_n: a.n.or(fe.gen_n).unwrap_or(5000),
            mc_n: 0,
            tuning: Default::default(),
        }),
        Command::Oracle(a) => Ok(ExperimentPlan {
            mode: PlanMode::Oracle,
            alphas: if a.alpha.is_empty() {
                fe.alphas.clone().unwrap_or_else(|| vec![0.3])
            } else {
                a.alpha.clone()
            },
            epsilons: vec![],
            sizes: vec![],
            reps: 1,
            master_seed: a.seed.or(fe.seed).unwrap_or(0),
            out: a
                .out
                .clone()
                .or_else(|| fe.out.clone())
                .unwrap_or_else(|| PathBuf::from("oracle.csv")),
            test_n: 0,
            gen_n: 0,
            mc_n: a.mc_n.or(fe.mc_n).unwrap_or(200_000),
            tuning: Default::default(),
        }),
        Command::Cdp(a) => build_sweep_plan(PlanMode::Cdp, a, &file),
        Command::Fdp(a) => build_sweep_plan(PlanMode::Fdp, a, &file),
        Command::Sweep(a) => {
            let mode = match a.mode.as_str() {
                "cdp" => PlanMode::Cdp,
                "fdp" => PlanMode::Fdp,
                other => return Err(format!("unknown sweep mode {other:?}")),
            };
            build_sweep_plan(mode, &a.sweep, &file)
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("FAIRFED_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let plan = match build_plan(&cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run_plan(&plan) {
        Ok(summary) => {
            println!(
                "wrote {} rows to {}",
                summary.rows.len(),
                summary.out.display()
            );
            if let Some(agg) = summary.agg_out {
                println!(
                    "wrote {} aggregates to {}",
                    summary.aggregates.len(),
                    agg.display()
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
