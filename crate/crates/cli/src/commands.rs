//! The `run`, `certify` and `sweep` commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use isekf::scenario::{simulate, SimulationTrace};
use isekf::stability::{bound_trajectory_check, candidate_sweep, certify};
use log::info;
use nalgebra::DVector;

use crate::config::{CertifyProblem, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::export::export_csv;
use crate::metrics::{compute_metrics, position_rmse, stage_windows, MetricsReport};
use crate::plot::render_plots;

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.txt";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub filters: Option<Vec<String>>,
    pub ell: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(filters) = &self.filters {
            cfg.filters.enabled = filters.clone();
        }
        if let Some(ell) = self.ell {
            cfg.filters.lsigma_ekf.ell = ell;
        }
        cfg.validate()
    }
}

/// Simulates the configured scenario with `cfg.seed` and computes metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(SimulationTrace, MetricsReport)> {
    let scenario = cfg.scenario_config()?;
    let filters = cfg.filter_specs()?;
    let trace = simulate(&scenario, &filters, cfg.seed)?;
    let report = compute_metrics(&trace, &scenario.schedule, cfg.metrics.divergence_threshold);
    Ok((trace, report))
}

/// Writes the CSV trace, SVG plots and metrics table into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, trace: &SimulationTrace, report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    if cfg.output.csv {
        let path = dir.join(TRACE_FILE);
        export_csv(trace, &path)?;
        written.push(path);
    }
    if cfg.output.svg && !trace.is_empty() {
        let windows = stage_windows(&cfg.schedule()?);
        written.extend(render_plots(trace, &windows, dir)?);
    }
    let path = dir.join(METRICS_FILE);
    std::fs::write(&path, report.render()).map_err(|e| HarnessError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// `run`: simulate, write outputs to `cfg.output.dir`, return the metrics.
pub fn run(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let (trace, report) = run_experiment(cfg)?;
    for f in &trace.failures {
        log::warn!("{} failed at step {}: {}", trace.filter_labels[f.filter], f.k, f.error);
    }
    let files = write_outputs(cfg, &trace, &report, &cfg.output.dir)?;
    info!("wrote {} files to {}", files.len(), cfg.output.dir.display());
    Ok(report)
}

/// `certify`: certificate report, plus the bound check and candidate sweep
/// when configured. A failed bound check is an error.
pub fn certify_report(problem: &CertifyProblem) -> Result<String> {
    let mut out = String::new();
    let (cand, cert) = match &problem.sweep {
        Some(grid) => {
            let (best, attempts) = candidate_sweep(
                &problem.system,
                &problem.candidate,
                &problem.params,
                problem.mu,
                &grid.w_grid,
                &grid.u_grid,
                &problem.options,
            );
            let _ = writeln!(out, "candidate sweep (w, u -> asymptotic bound):");
            for (w, u, res) in &attempts {
                match res {
                    Ok(b) => {
                        let _ = writeln!(out, "  {w:.6e} {u:.6e} -> {b:.6e}");
                    }
                    Err(e) => {
                        let _ = writeln!(out, "  {w:.6e} {u:.6e} -> rejected: {e}");
                    }
                }
            }
            best.ok_or_else(|| {
                HarnessError::Core(isekf::Error::Certification("no candidate in the sweep grid certifies".into()))
            })?
        }
        None => {
            let cert = certify(&problem.system, &problem.candidate, &problem.params, problem.mu, &problem.options)?;
            (problem.candidate.clone(), cert)
        }
    };
    out.push_str(&cert.report());
    if let Some(spec) = &problem.check {
        let mut d = DVector::zeros(problem.system.outlier_dim());
        if d.len() > 0 {
            d[0] = problem.mu;
        }
        let rep = bound_trajectory_check(&problem.system, &cand, &problem.params, &cert, spec, |_| d.clone())?;
        let _ = writeln!(
            out,
            "bound check: {} samples, max |e|/bound = {:.6e}, final |e| = {:.6e}",
            rep.times.len(),
            rep.max_ratio,
            rep.final_error_norm()
        );
    }
    Ok(out)
}

/// Per-seed outcome of a sweep.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricsReport,
}

/// `sweep`: runs every seed of `cfg.batch`, each writing into
/// `<out>/seed_<n>/`. Seeds run concurrently; results are in seed order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    let seeds: Vec<u64> = (0..cfg.batch.count).map(|i| cfg.batch.first_seed + i).collect();
    let threads = match cfg.batch.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(seeds.len())
    .max(1);
    let chunk = seeds.len().div_ceil(threads);
    let results: Vec<Result<SeedResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|batch| {
                scope.spawn(move || {
                    batch
                        .iter()
                        .map(|&seed| {
                            let mut seed_cfg = cfg.clone();
                            seed_cfg.seed = seed;
                            let (trace, report) = run_experiment(&seed_cfg)?;
                            let dir = cfg.output.dir.join(format!("seed_{seed}"));
                            write_outputs(&seed_cfg, &trace, &report, &dir)?;
                            Ok(SeedResult { seed, report })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("seed worker panicked"))
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let path = cfg.output.dir.join("sweep_summary.txt");
    std::fs::write(&path, sweep_summary(&results)).map_err(|e| HarnessError::io(&path, e))?;
    Ok(results)
}

/// Mean, min and max full-horizon position RMSE and the divergence count
/// per filter.
pub fn sweep_summary(results: &[SeedResult]) -> String {
    let mut out = String::new();
    let Some(first) = results.iter().find(|r| !r.report.is_empty()) else {
        return "no data\n".into();
    };
    for f in &first.report.filters {
        let vals: Vec<f64> = results
            .iter()
            .filter_map(|r| r.report.filter(&f.label)?.rmse.as_ref().map(position_rmse))
            .collect();
        let divergent = results
            .iter()
            .filter(|r| r.report.filter(&f.label).is_some_and(|m| m.divergent))
            .count();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{}: position rmse mean {mean:.4} min {min:.4} max {max:.4} over {} seeds, divergent on {divergent}",
            f.label,
            vals.len()
        );
    }
    out
}
