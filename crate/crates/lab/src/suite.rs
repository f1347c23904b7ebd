//! The reference acceptance criteria run by `full-suite`.

use std::f64::consts::PI;

use symbridge::io::write_table_csv;
use symbridge::{
    fk_kernel_grid, mass_kernel, sinkhorn_bridge, solve_symmetric, Grid, PairWeight, SeedPlan,
    TrapPotential,
};

use crate::config::ExperimentConfig;
use crate::experiments::{self as ex, Problem};
use crate::report::{Artifacts, Check};

pub struct Criterion {
    pub id: &'static str,
    /// Wall-clock budget in seconds, checked as `<id>.runtime_seconds`.
    pub runtime_limit: Option<f64>,
    pub run: fn(&ExperimentConfig, &mut Artifacts) -> anyhow::Result<Vec<Check>>,
}

pub const CRITERIA: &[Criterion] = &[
    Criterion { id: "c01_dirichlet_eigenvalue", runtime_limit: Some(1.0), run: c01 },
    Criterion { id: "c02_harmonic_eigenvalue", runtime_limit: None, run: c02 },
    Criterion { id: "c03_eigen_trace_consistency", runtime_limit: Some(30.0), run: c03 },
    Criterion { id: "c04_free_energy_limit", runtime_limit: Some(60.0), run: c04 },
    Criterion { id: "c05_cycle_recursion", runtime_limit: Some(10.0), run: c05 },
    Criterion { id: "c06_hard_wall_minimizer", runtime_limit: None, run: c06 },
    Criterion { id: "c07_soft_wall_bridge", runtime_limit: None, run: c07 },
    Criterion { id: "c08_objective_optimality", runtime_limit: None, run: c08 },
    Criterion { id: "c09_martingale", runtime_limit: Some(60.0), run: c09 },
    Criterion { id: "c10_ergodic_stationarity", runtime_limit: Some(120.0), run: c10 },
    Criterion { id: "c11_dv_duality", runtime_limit: None, run: c11 },
    Criterion { id: "c12_ensemble_to_diffusion", runtime_limit: Some(300.0), run: c12 },
];

pub fn criterion(id: &str) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id == id)
}

/// Runs one criterion; errors become a failed check, and the runtime budget
/// becomes a check of its own.
pub fn run_criterion(c: &Criterion, cfg: &ExperimentConfig, art: &mut Artifacts) -> (Vec<Check>, f64) {
    let start = std::time::Instant::now();
    let mut checks = match (c.run)(cfg, art) {
        Ok(v) => v,
        Err(e) => vec![Check::failed(format!("{}.error", c.id), format!("{e:#}"))],
    };
    let secs = start.elapsed().as_secs_f64();
    if let Some(limit) = c.runtime_limit {
        checks.push(Check::at_most(format!("{}.runtime_seconds", c.id), secs, limit));
    }
    (checks, secs)
}

pub fn hard_wall_pi(n: usize, beta: f64) -> Problem {
    Problem::new(
        "hard_wall_0_pi",
        TrapPotential::hard_wall(&[(0.0, PI)]).unwrap(),
        Grid::interval(0.0, PI, n).unwrap(),
        beta,
    )
}

pub fn harmonic(lo: f64, hi: f64, n: usize, beta: f64) -> Problem {
    Problem::new("harmonic", TrapPotential::harmonic(1), Grid::interval(lo, hi, n).unwrap(), beta)
}

fn prefixed(id: &str, what: &str) -> String {
    format!("{id}.{what}")
}

fn c01(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = hard_wall_pi(201, 1.0);
    let (checks, _) = ex::eigen_checks("c01_dirichlet_eigenvalue", &p, &cfg.tol, art)?;
    Ok(checks.into_iter().filter(|c| !c.name.ends_with("phi_sup_error")).collect())
}

fn c02(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = harmonic(-8.0, 8.0, 401, 1.0);
    Ok(ex::eigen_checks("c02_harmonic_eigenvalue", &p, &cfg.tol, art)?.0)
}

fn c03(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let id = "c03_eigen_trace_consistency";
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (t, make) in [
        (0.0, hard_wall_pi as fn(usize, f64) -> Problem),
        (1.0, |n, b| harmonic(-7.0, 7.0, n, b)),
    ] {
        for beta in [0.5, 1.0, 2.0] {
            let p = make(if t == 0.0 { 201 } else { 141 }, beta);
            let lambda = symbridge::ground_state(&p.w, &p.grid)?.lambda;
            let (c, lhs) = ex::trace_consistency(&format!("{id}.{}_beta_{beta}", p.name), &p, lambda, &cfg.tol)?;
            rows.push(vec![t, beta, lhs, beta * lambda]);
            checks.push(c);
        }
    }
    art.write(&format!("{id}.csv"), |o| {
        write_table_csv(
            o,
            &[("trap_code".into(), "0=hard_wall_0_pi;1=harmonic".into())],
            &["trap", "beta", "minus_log_lambda_t", "beta_lambda"],
            rows,
        )
    })?;
    Ok(checks)
}

fn c04(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = hard_wall_pi(201, 1.0);
    ex::free_energy_checks("c04_free_energy_limit", &p, 12, 1.0, &cfg.tol, art)
}

fn c05(cfg: &ExperimentConfig, _: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let id = "c05_cycle_recursion";
    let mut checks = Vec::new();
    for p in [hard_wall_pi(20, 1.0), harmonic(-3.0, 3.0, 20, 1.0)] {
        let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
        checks.push(ex::recursion_check(&format!("{id}.{}", p.name), &k, 6, &cfg.tol)?);
    }
    Ok(checks)
}

/// Sinkhorn with uniform marginals on the box against `p_{β,Λ}/|Λ|`, and
/// against the eigen-based `q*` for `m = dx` on the box, `g = p_β`.
fn c06(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let id = "c06_hard_wall_minimizer";
    let p = hard_wall_pi(201, 1.0);
    let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
    let m = p.admissible_nodes();
    let g = PairWeight::FreeKernel;
    let uniform = m.normalized()?;
    let kernel = mass_kernel(&k, &g, &m)?;
    let sk = sinkhorn_bridge(&kernel, &uniform, &uniform, cfg.tol.sinkhorn)?;
    let volume = m.total_mass();
    // p_{β,Λ}(x,y)/|Λ| dx dy in node masses.
    let target = &kernel / volume;
    let q = sk.q.masses();
    let peak = target.iter().fold(0.0f64, |a, v| a.max(*v));
    let mut worst = 0.0f64;
    for ((i, j), t) in target.indexed_iter() {
        let (x, y) = (p.grid.coord(0, i), p.grid.coord(0, j));
        let interior = [x, y].iter().all(|v| *v >= 0.5 && *v <= PI - 0.5);
        if interior && *t > 1e-3 * peak {
            worst = worst.max((q[[i, j]] - t).abs() / t);
        }
    }
    let target_mass = target.sum();
    let row_spread = {
        let rows: Vec<f64> = target.rows().into_iter().zip(m.masses()).filter(|(_, w)| *w > 0.0).map(|(r, w)| r.sum() / w).collect();
        let (lo, hi) = rows.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        hi / lo
    };
    let sol = solve_symmetric(&k, &g, &m)?;
    let tv = sk.q.tv_distance(sol.q_star())?;
    art.write(&format!("{id}_sinkhorn_q.csv"), |o| sk.q.write_csv(o))?;
    art.write(&format!("{id}_q_star.csv"), |o| sol.q_star().write_csv(o))?;
    Ok(vec![
        Check::at_most(prefixed(id, "interior_entry_rel_error"), worst, cfg.tol.hard_wall_entry_rel).with_detail(format!(
            "p_beta_box/|box| has total mass {target_mass:.6} and row sums / dx ranging over a factor {row_spread:.3}"
        )),
        Check::at_most(prefixed(id, "sinkhorn_vs_eigen_tv"), tv, cfg.tol.coupling_tv),
    ])
}

fn c07(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = harmonic(-7.0, 7.0, 141, 1.0);
    let checks = ex::bridge_checks("c07_soft_wall_bridge", &p, &cfg.tol, 0, cfg.seed(), art)?;
    Ok(checks
        .into_iter()
        .filter(|c| c.name.contains("sinkhorn_vs_eigen") || c.name.contains("factorization"))
        .collect())
}

fn c08(cfg: &ExperimentConfig, _: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = harmonic(-7.0, 7.0, 141, 1.0);
    let mut none = Artifacts::new(None);
    let checks = ex::bridge_checks("c08_objective_optimality", &p, &cfg.tol, cfg.probes, cfg.seed(), &mut none)?;
    Ok(checks
        .into_iter()
        .filter(|c| {
            let check = c.name.rsplit('.').next().unwrap_or_default();
            check.starts_with("objective") || check.starts_with("probe")
        })
        .collect())
}

fn c09(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let id = "c09_martingale";
    let plan = SeedPlan::new(cfg.seed()).fork(9);
    let mut checks = Vec::new();
    for (k, (p, starts)) in [
        (harmonic(-8.0, 8.0, 401, 1.0), vec![-1.0, -0.5, 0.0, 0.5, 1.0]),
        (hard_wall_pi(201, 1.0), vec![0.5, 1.0, PI / 2.0, 2.0, 2.5]),
    ]
    .into_iter()
    .enumerate()
    {
        let s = symbridge::ground_state(&p.w, &p.grid)?;
        checks.extend(ex::martingale_checks(
            &format!("{id}.{}", p.name),
            &p,
            &s,
            &starts,
            cfg.mc_samples,
            100,
            plan.fork(k as u64),
            &cfg.tol,
            art,
        )?);
    }
    Ok(checks)
}

fn c10(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let id = "c10_ergodic_stationarity";
    let plan = SeedPlan::new(cfg.seed()).fork(10);
    let mut checks = Vec::new();
    for (k, p) in [harmonic(-8.0, 8.0, 401, 1.0), hard_wall_pi(201, 1.0)].into_iter().enumerate() {
        let s = symbridge::ground_state(&p.w, &p.grid)?;
        checks.extend(ex::occupation_checks(
            &format!("{id}.{}", p.name),
            &p,
            &s,
            cfg.t_total,
            cfg.dt,
            plan.fork(k as u64),
            &cfg.tol,
            art,
        )?);
    }
    Ok(checks)
}

fn c11(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = harmonic(-8.0, 8.0, 201, 1.0);
    ex::duality_checks("c11_dv_duality", &p, 10, cfg.seed(), &cfg.tol, art)
}

fn c12(cfg: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<Vec<Check>> {
    let p = hard_wall_pi(41, 0.25);
    ex::ensemble_convergence(
        "c12_ensemble_to_diffusion",
        &p,
        &[2, 4, 8],
        cfg.steps,
        cfg.n_samples,
        SeedPlan::new(cfg.seed()).fork(12),
        &cfg.tol,
        art,
    )
}
