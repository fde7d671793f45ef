//! Experiment runner: sweeps over (alpha, epsilon, size) cells, replicate
//! management with per-cell RNG derivation, and CSV emission of per-replicate
//! rows plus aggregated means with normal-approximation 95% bands.

use crate::classifier::bayes_oracle;
use crate::core::{stream, FederationConfig, NoiseMode, PrivacyBudget, RngStream};
use crate::datagen::{
    gen_synthetic, partition_sites, run_pipeline, write_csv, PipelineMode, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::kde::{cross_validate_bandwidth, DEFAULT_BANDWIDTHS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// What a plan executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// Write a synthetic dataset to CSV.
    Gen,
    /// Monte Carlo oracle baselines per alpha.
    Oracle,
    /// Single-server pipeline sweeps.
    Cdp,
    /// Federated pipeline sweeps.
    Fdp,
}

/// Sites and per-site size of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub sites: usize,
    pub site_size: usize,
}

impl SizeSpec {
    pub fn total(&self) -> usize {
        self.sites * self.site_size
    }
}

/// Tuning knobs shared by every cell of a plan; `None` means "select at run
/// time" where the pipeline supports it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanTuning {
    pub h: Option<f64>,
    pub depth: Option<usize>,
    pub rho_star: f64,
    pub c_omega: f64,
    pub eta_tol: f64,
    pub k_eigen: usize,
    pub grid_resolution: usize,
    /// Re-run bandwidth cross-validation inside every replicate instead of
    /// once per size cell.
    pub cv_per_rep: bool,
    /// Override the default leakage `delta = (N_s/2)^-2`.
    pub delta: Option<f64>,
    /// Safety margin subtracted from alpha inside the threshold selection.
    pub alpha_backoff: f64,
    pub noise: NoiseMode,
}

impl Default for PlanTuning {
    fn default() -> Self {
        Self {
            h: None,
            depth: None,
            rho_star: 0.03,
            c_omega: 0.1,
            eta_tol: 0.05,
            k_eigen: 35,
            grid_resolution: 30,
            cv_per_rep: false,
            delta: None,
            alpha_backoff: 0.0,
            noise: NoiseMode::Calibrated,
        }
    }
}

/// A full experiment description; one CSV row per (cell, replicate) comes
/// out the other end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub mode: PlanMode,
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub sizes: Vec<SizeSpec>,
    pub reps: usize,
    pub master_seed: u64,
    pub out: PathBuf,
    /// Independent test-set size per replicate.
    pub test_n: usize,
    /// Sample size for `gen` mode.
    pub gen_n: usize,
    /// Monte Carlo size for `oracle` mode.
    pub mc_n: usize,
    #[serde(default)]
    pub tuning: PlanTuning,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be >= 1".into()));
        }
        match self.mode {
            PlanMode::Gen => {
                if self.gen_n == 0 {
                    return Err(Error::InvalidConfig("gen mode needs gen_n >= 1".into()));
                }
            }
            PlanMode::Oracle => {
                if self.alphas.is_empty() {
                    return Err(Error::InvalidConfig("oracle mode needs alphas".into()));
                }
            }
            PlanMode::Cdp | PlanMode::Fdp => {
                if self.alphas.is_empty() || self.epsilons.is_empty() || self.sizes.is_empty() {
                    return Err(Error::InvalidConfig(
                        "sweeps need alphas, epsilons and sizes".into(),
                    ));
                }
                if self.test_n == 0 {
                    return Err(Error::InvalidConfig("test_n must be >= 1".into()));
                }
                if self.mode == PlanMode::Cdp && self.sizes.iter().any(|s| s.sites != 1) {
                    return Err(Error::InvalidConfig(
                        "cdp mode requires sites = 1 in every size cell".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One result row.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub mode: String,
    pub s: usize,
    pub n: usize,
    pub eps: f64,
    pub delta: f64,
    pub alpha: f64,
    pub rep: usize,
    pub seed: u64,
    pub error: f64,
    pub empirical_dd: f64,
    pub tau: f64,
    pub flags: String,
}

/// Aggregate of one cell: means with 1.96 sd / sqrt(R) bands.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub mode: String,
    pub s: usize,
    pub n: usize,
    pub eps: f64,
    pub alpha: f64,
    pub reps: usize,
    pub mean_error: f64,
    pub band_error: f64,
    pub mean_dd: f64,
    pub band_dd: f64,
    pub mean_tau: f64,
    pub flagged: usize,
}

/// Outcome of a plan run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    pub out: PathBuf,
    pub agg_out: Option<PathBuf>,
}

fn cell_config(
    plan: &ExperimentPlan,
    size: SizeSpec,
    eps: f64,
    alpha: f64,
    h: Option<f64>,
) -> Result<FederationConfig> {
    let t = &plan.tuning;
    let delta = t
        .delta
        .unwrap_or_else(|| PrivacyBudget::default_delta(size.site_size));
    let budget = PrivacyBudget::new(eps, delta)?;
    let w = 1.0 / size.sites as f64;
    let cfg = FederationConfig {
        sites: size.sites,
        budgets: vec![budget; size.sites],
        nu: vec![w; size.sites],
        mu: vec![w; size.sites],
        alpha,
        alpha_backoff: t.alpha_backoff,
        h,
        depth: t.depth,
        rho_star: t.rho_star,
        c_omega: t.c_omega,
        eta_tol: t.eta_tol,
        k_eigen: t.k_eigen,
        grid_resolution: t.grid_resolution,
        noise: t.noise,
        policy: Default::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Bandwidth for a size cell: explicit override, or three-fold
/// cross-validation on a pilot dataset drawn from the cell's own stream.
fn pilot_bandwidth(plan: &ExperimentPlan, size_idx: usize, size: SizeSpec) -> Result<f64> {
    if let Some(h) = plan.tuning.h {
        return Ok(h);
    }
    let spec = SyntheticSpec::default();
    let stream = RngStream::new(plan.master_seed)
        .child(stream::PILOT)
        .child(size_idx as u64);
    let records = gen_synthetic(
        &spec,
        size.site_size,
        &mut stream.child(stream::DATAGEN).rng(),
    );
    let train: Vec<_> = records[..records.len().div_ceil(2)].to_vec();
    let mut rng = stream.child(stream::CV_FOLDS).rng();
    cross_validate_bandwidth(&train, 3, &DEFAULT_BANDWIDTHS, &mut rng)
}

/// Execute the plan and write the row CSV (and, for sweep modes, the
/// aggregate CSV next to it).
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunSummary> {
    plan.validate()?;
    match plan.mode {
        PlanMode::Gen => run_gen(plan),
        PlanMode::Oracle => run_oracle(plan),
        PlanMode::Cdp | PlanMode::Fdp => run_sweep(plan),
    }
}

fn run_gen(plan: &ExperimentPlan) -> Result<RunSummary> {
    let spec = SyntheticSpec::default();
    let mut rng = RngStream::new(plan.master_seed)
        .child(stream::DATAGEN)
        .rng();
    let records = gen_synthetic(&spec, plan.gen_n, &mut rng);
    write_csv(&records, std::fs::File::create(&plan.out)?)?;
    Ok(RunSummary {
        rows: Vec::new(),
        aggregates: Vec::new(),
        out: plan.out.clone(),
        agg_out: None,
    })
}

fn run_oracle(plan: &ExperimentPlan) -> Result<RunSummary> {
    let spec = SyntheticSpec::default();
    let rows: Vec<ResultRow> = plan
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let stream = RngStream::new(plan.master_seed)
                .child(stream::ORACLE)
                .child(i as u64);
            let oracle = bayes_oracle(&spec, alpha, plan.mc_n, &mut stream.rng());
            ResultRow {
                mode: "oracle".into(),
                s: 1,
                n: plan.mc_n,
                eps: f64::INFINITY,
                delta: 0.0,
                alpha,
                rep: 0,
                seed: stream.fingerprint(),
                error: oracle.fair_bayes_risk,
                empirical_dd: oracle.intrinsic_dd,
                tau: oracle.tau_star,
                flags: String::new(),
            }
        })
        .collect();
    write_rows(&plan.out, &rows)?;
    Ok(RunSummary {
        rows,
        aggregates: Vec::new(),
        out: plan.out.clone(),
        agg_out: None,
    })
}

fn run_sweep(plan: &ExperimentPlan) -> Result<RunSummary> {
    let spec = SyntheticSpec::default();
    let mode_name = match plan.mode {
        PlanMode::Cdp => "cdp",
        PlanMode::Fdp => "fdp",
        _ => unreachable!(),
    };
    let pipeline_mode = match plan.mode {
        PlanMode::Cdp => PipelineMode::Cdp,
        _ => PipelineMode::Fdp,
    };

    // bandwidth per size cell unless overridden or per-rep CV requested
    let mut cell_h: Vec<Option<f64>> = Vec::with_capacity(plan.sizes.len());
    for (i, &size) in plan.sizes.iter().enumerate() {
        if plan.tuning.cv_per_rep {
            cell_h.push(None);
        } else {
            cell_h.push(Some(pilot_bandwidth(plan, i, size)?));
        }
    }

    // cells in a deterministic order
    let mut cells = Vec::new();
    for (si, &size) in plan.sizes.iter().enumerate() {
        for &eps in &plan.epsilons {
            for &alpha in &plan.alphas {
                cells.push((si, size, eps, alpha));
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..plan.reps).map(move |r| (c, r)))
        .collect();

    let rows: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(cell_idx, rep)| -> Result<ResultRow> {
            let (si, size, eps, alpha) = cells[cell_idx];
            let config = cell_config(plan, size, eps, alpha, cell_h[si])?;
            let cell_stream = RngStream::new(plan.master_seed)
                .child(stream::CELL)
                .child(cell_idx as u64)
                .child(rep as u64);
            let records = gen_synthetic(
                &spec,
                size.total(),
                &mut cell_stream.child(stream::DATAGEN).rng(),
            );
            let sites = partition_sites(
                &records,
                size.sites,
                None,
                &mut cell_stream.child(stream::PARTITION).rng(),
            )?;
            let test = gen_synthetic(
                &spec,
                plan.test_n,
                &mut cell_stream.child(stream::DATAGEN).child(1).rng(),
            );
            let out = run_pipeline(&config, &sites, pipeline_mode, &test, &cell_stream)?;
            Ok(ResultRow {
                mode: mode_name.into(),
                s: size.sites,
                n: size.total(),
                eps,
                delta: config.budgets[0].delta,
                alpha,
                rep,
                seed: cell_stream.fingerprint(),
                error: out.metrics.misclassification,
                empirical_dd: out.metrics.empirical_dd,
                tau: out.tau,
                flags: out.metrics.flags.join(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregates = aggregate_rows(&rows);
    write_rows(&plan.out, &rows)?;
    let agg_out = agg_path(&plan.out);
    write_aggregates(&agg_out, &aggregates)?;
    Ok(RunSummary {
        rows,
        aggregates,
        out: plan.out.clone(),
        agg_out: Some(agg_out),
    })
}

/// `results.csv -> results.agg.csv`
pub fn agg_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    out.with_file_name(format!("{stem}.agg.csv"))
}

/// Group rows by cell and compute means with 95% normal bands.
pub fn aggregate_rows(rows: &[ResultRow]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    let key = |r: &ResultRow| (r.mode.clone(), r.s, r.n, r.eps.to_bits(), r.alpha.to_bits());
    let mut groups: BTreeMap<_, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&ResultRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let sd = |f: &dyn Fn(&ResultRow) -> f64, m: f64| {
                if rs.len() < 2 {
                    0.0
                } else {
                    (rs.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                }
            };
            let me = mean(&|r| r.error);
            let md = mean(&|r| r.empirical_dd);
            let se = sd(&|r| r.error, me);
            let sdd = sd(&|r| r.empirical_dd, md);
            AggregateRow {
                mode: rs[0].mode.clone(),
                s: rs[0].s,
                n: rs[0].n,
                eps: rs[0].eps,
                alpha: rs[0].alpha,
                reps: rs.len(),
                mean_error: me,
                band_error: 1.96 * se / n.sqrt(),
                mean_dd: md,
                band_dd: 1.96 * sdd / n.sqrt(),
                mean_tau: mean(&|r| r.tau),
                flagged: rs.iter().filter(|r| !r.flags.is_empty()).count(),
            }
        })
        .collect()
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ParseError(e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::ParseError(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_aggregates(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ParseError(e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::ParseError(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(dir: &Path) -> ExperimentPlan {
        ExperimentPlan {
            mode: PlanMode::Cdp,
            alphas: vec![0.3],
            epsilons: vec![2.0],
            sizes: vec![SizeSpec {
                sites: 1,
                site_size: 300,
            }],
            reps: 2,
            master_seed: 7,
            out: dir.join("rows.csv"),
            test_n: 200,
            gen_n: 0,
            mc_n: 0,
            tuning: PlanTuning {
                h: Some(0.2),
                grid_resolution: 12,
                ..Default::default()
            },
        }
    }

    #[test]
    fn sweep_rows_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(dir.path());
        let s1 = run_plan(&plan).unwrap();
        let bytes1 = std::fs::read(&plan.out).unwrap();
        let s2 = run_plan(&plan).unwrap();
        let bytes2 = std::fs::read(&plan.out).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(s1.rows.len(), 2);
        assert_eq!(s2.rows.len(), 2);
        assert!(s1.agg_out.is_some());
    }

    #[test]
    fn aggregates_match_row_means() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(dir.path());
        plan.reps = 3;
        let summary = run_plan(&plan).unwrap();
        let agg = &summary.aggregates[0];
        let mean_err =
            summary.rows.iter().map(|r| r.error).sum::<f64>() / summary.rows.len() as f64;
        assert!((agg.mean_error - mean_err).abs() < 1e-12);
        assert_eq!(agg.reps, 3);
    }

    #[test]
    fn gen_mode_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan {
            mode: PlanMode::Gen,
            alphas: vec![],
            epsilons: vec![],
            sizes: vec![],
            reps: 1,
            master_seed: 3,
            out: dir.path().join("gen.csv"),
            test_n: 0,
            gen_n: 100,
            mc_n: 0,
            tuning: Default::default(),
        };
        run_plan(&plan).unwrap();
        let content = std::fs::read_to_string(&plan.out).unwrap();
        assert!(content.starts_with("x1,x2,a,y"));
        assert_eq!(content.lines().count(), 101);
    }

    #[test]
    fn plan_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(dir.path());
        plan.sizes[0].sites = 2;
        assert!(plan.validate().is_err()); // cdp needs one site
        plan.mode = PlanMode::Fdp;
        assert!(plan.validate().is_ok());
        plan.reps = 0;
        assert!(plan.validate().is_err());
    }
}
