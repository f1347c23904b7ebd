//! Dispatches a validated config to its experiment and assembles the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use symbridge::{fk_kernel_grid, ground_state, Grid, SeedPlan};

use crate::config::{Experiment, ExperimentConfig};
use crate::experiments::{self as ex, Problem};
use crate::report::{Artifacts, Check, RunReport};
use crate::suite;

type Stage<'a> = (&'static str, Box<dyn FnOnce(&mut Artifacts) -> anyhow::Result<Vec<Check>> + 'a>);

/// Runs the configured experiment, writing artifacts and `report.json` to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunReport> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut art = Artifacts::new(Some(out.to_path_buf()));
    let (checks, timings) = match cfg.experiment {
        Experiment::FullSuite => {
            let (mut checks, timings) = run_suite(cfg, &mut art);
            checks.push(reproducibility_check(cfg, out, &art_files_snapshot(&art)));
            (checks, timings)
        }
        _ => run_stages(single_experiment(cfg)?, &mut art),
    };
    let report = RunReport::new(cfg.clone(), checks, art.into_files(), timings);
    report.write(&out.join("report.json"))?;
    Ok(report)
}

fn art_files_snapshot(art: &Artifacts) -> Vec<String> {
    let mut files: Vec<String> = art.files().iter().filter(|n| n.ends_with(".csv")).cloned().collect();
    files.sort();
    files.dedup();
    files
}

fn run_stages(stages: Vec<Stage<'_>>, art: &mut Artifacts) -> (Vec<Check>, BTreeMap<String, f64>) {
    let mut checks = Vec::new();
    let mut timings = BTreeMap::new();
    for (name, f) in stages {
        let start = Instant::now();
        match f(art) {
            Ok(c) => checks.extend(c),
            Err(e) => checks.push(Check::failed(format!("{name}.error"), format!("{e:#}"))),
        }
        timings.insert(name.to_string(), start.elapsed().as_secs_f64());
    }
    (checks, timings)
}

/// Every reference criterion in order.
pub fn run_suite(cfg: &ExperimentConfig, art: &mut Artifacts) -> (Vec<Check>, BTreeMap<String, f64>) {
    let mut checks = Vec::new();
    let mut timings = BTreeMap::new();
    for c in suite::CRITERIA {
        let (cs, secs) = suite::run_criterion(c, cfg, art);
        checks.extend(cs);
        timings.insert(c.id.to_string(), secs);
    }
    (checks, timings)
}

/// Reruns the suite into a scratch directory and compares every CSV byte for byte.
fn reproducibility_check(cfg: &ExperimentConfig, out: &Path, files: &[String]) -> Check {
    let name = "c13_reproducibility.identical_csv";
    let scratch = out.join(".rerun");
    let result = (|| -> anyhow::Result<Vec<String>> {
        std::fs::create_dir_all(&scratch)?;
        let mut art = Artifacts::new(Some(scratch.clone()));
        run_suite(cfg, &mut art);
        let mut differing = Vec::new();
        for f in files {
            let a = std::fs::read(out.join(f))?;
            let b = std::fs::read(scratch.join(f)).unwrap_or_default();
            if a != b {
                differing.push(f.clone());
            }
        }
        Ok(differing)
    })();
    let _ = std::fs::remove_dir_all(&scratch);
    match result {
        Ok(diff) => Check::holds(name, diff.is_empty() && !files.is_empty())
            .with_detail(format!("{} csv files compared, differing: {diff:?}", files.len())),
        Err(e) => Check::failed(name, format!("{e:#}")),
    }
}

fn problem(cfg: &ExperimentConfig) -> anyhow::Result<Problem> {
    Ok(Problem::new("configured", cfg.trap().clone(), cfg.grid()?, cfg.beta))
}

/// Nodes at the 10%, 30%, ..., 90% quantiles of `φ²` (first axis).
fn quantile_points(grid: &Grid, phi: &[f64]) -> Vec<f64> {
    let total: f64 = phi.iter().map(|p| p * p).sum();
    let mut acc = 0.0;
    let mut out = Vec::new();
    let mut targets = [0.1, 0.3, 0.5, 0.7, 0.9].into_iter().peekable();
    for (i, p) in phi.iter().enumerate() {
        acc += p * p / total;
        while let Some(&t) = targets.peek() {
            if acc >= t {
                out.push(grid.node(i)[0]);
                targets.next();
            } else {
                break;
            }
        }
    }
    out
}

fn single_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Stage<'_>>> {
    let p = problem(cfg)?;
    let tol = &cfg.tol;
    let seed = cfg.seed();
    let stages: Vec<Stage<'_>> = match cfg.experiment {
        Experiment::Spectral => vec![("spectral", Box::new(move |art| Ok(ex::eigen_checks("spectral", &p, tol, art)?.0)))],
        Experiment::Transport => vec![(
            "transport",
            Box::new(move |art| {
                let lambda = ground_state(&p.w, &p.grid)?.lambda;
                let mut checks = vec![ex::trace_consistency("transport", &p, lambda, tol)?.0];
                checks.extend(ex::bridge_checks("transport", &p, tol, cfg.probes, seed, art)?);
                Ok(checks)
            }),
        )],
        Experiment::Ensemble => {
            let mut counts: Vec<usize> = std::iter::successors(Some(2usize), |n| Some(n * 2))
                .take_while(|n| *n < cfg.particles)
                .collect();
            counts.push(cfg.particles);
            vec![(
                "ensemble",
                Box::new(move |art| {
                    ex::ensemble_convergence("ensemble", &p, &counts, cfg.steps, cfg.n_samples, SeedPlan::new(seed), tol, art)
                }),
            )]
        }
        Experiment::Diffusion => vec![(
            "diffusion",
            Box::new(move |art| {
                let s = ground_state(&p.w, &p.grid)?;
                let plan = SeedPlan::new(seed);
                let mut checks = ex::occupation_checks("diffusion", &p, &s, cfg.t_total, cfg.dt, plan.fork(0), tol, art)?;
                let starts = quantile_points(&p.grid, &s.phi);
                let steps = (p.beta / cfg.dt).ceil().clamp(10.0, 1000.0) as usize;
                checks.extend(ex::martingale_checks("diffusion", &p, &s, &starts, cfg.mc_samples, steps, plan.fork(1), tol, art)?);
                Ok(checks)
            }),
        )],
        Experiment::DvCheck => vec![("dv_check", Box::new(move |art| ex::duality_checks("dv_check", &p, 10, seed, tol, art)))],
        Experiment::Trace => vec![(
            "trace",
            Box::new(move |art| {
                let lambda = ground_state(&p.w, &p.grid)?.lambda;
                let mut checks = ex::free_energy_checks("trace", &p, cfg.particles, lambda, tol, art)?;
                let bounds: Vec<(f64, f64)> = p.grid.lower().iter().copied().zip(p.grid.upper().iter().copied()).collect();
                let small = Grid::new(&bounds, if p.grid.dim() == 1 { 20 } else { 5 })?;
                let k = fk_kernel_grid(&p.w, p.beta, &small, None)?;
                checks.push(ex::recursion_check("trace.recursion", &k, cfg.particles.min(6), tol)?);
                Ok(checks)
            }),
        )],
        Experiment::FullSuite => unreachable!("handled by run_suite"),
    };
    Ok(stages)
}

/// Output directory: the command-line flag, else the config, else `symbridge-out`.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("symbridge-out"))
}
