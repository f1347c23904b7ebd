//! Building blocks shared by the single experiments and the full suite.
//! Each returns checks named `<prefix>.<what>` and may write artifacts.

use anyhow::{ensure, Context};
use itertools::Itertools;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;
use symbridge::io::write_table_csv;
use symbridge::{
    cycle_type, dv_duality_check, ergodic_occupation, fk_kernel_grid, free_energy_curve,
    ground_state, ground_state_drift, martingale_check, mass_kernel, factorization_check,
    measure_distance, run_ensemble, schrodinger_objective, schrodinger_process_sampler,
    sinkhorn_bridge, solve_symmetric, sym_trace_exact, DiscreteMeasure, EnsembleSpec, FKKernel,
    Grid, PairMeasure, PairWeight, SeedPlan, SpectralResult, TrapPotential,
};

use crate::config::Tolerances;
use crate::report::{Artifacts, Check};

/// A trap on a grid at inverse temperature `beta`.
#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub w: TrapPotential,
    pub grid: Grid,
    pub beta: f64,
}

impl Problem {
    pub fn new(name: &str, w: TrapPotential, grid: Grid, beta: f64) -> Self {
        Self {
            name: name.to_string(),
            w,
            grid,
            beta,
        }
    }

    fn meta(&self, seed: Option<u64>) -> Vec<(String, String)> {
        let mut m = vec![
            ("problem".to_string(), self.name.clone()),
            ("beta".to_string(), symbridge::io::fmt_f64(self.beta)),
            ("n".to_string(), self.grid.points_per_axis().to_string()),
        ];
        if let Some(s) = seed {
            m.push(("seed".to_string(), s.to_string()));
        }
        m
    }

    /// Nodes where a path may start: strictly inside a hard wall, everywhere
    /// for soft traps.
    pub fn admissible_nodes(&self) -> DiscreteMeasure {
        match self.w.hard_wall_box() {
            Some((lo, hi)) => {
                let (lo, hi) = (lo.to_vec(), hi.to_vec());
                DiscreteMeasure::lebesgue_where(self.grid.clone(), move |x| {
                    (0..x.len()).all(|a| x[a] > lo[a] && x[a] < hi[a])
                })
            }
            None => DiscreteMeasure::lebesgue(self.grid.clone()),
        }
    }
}

/// Closed-form ground state of `-Δ + W` for boxes and quadratic traps.
pub struct Analytic {
    pub lambda: f64,
    axes: Vec<AxisMode>,
}

enum AxisMode {
    /// `sqrt(2/L) sin(π(x-lo)/L)`.
    Sine { lo: f64, len: f64 },
    /// `(s/π)^{1/4} exp(-s (x-c)^2 / 2)` with `s = sqrt(coefficient)`.
    Gauss { center: f64, s: f64 },
}

impl Analytic {
    pub fn of(w: &TrapPotential) -> Option<Self> {
        match w {
            TrapPotential::HardWall { lower, upper } => {
                let axes: Vec<AxisMode> = lower
                    .iter()
                    .zip(upper)
                    .map(|(lo, hi)| AxisMode::Sine { lo: *lo, len: hi - lo })
                    .collect();
                let lambda = axes
                    .iter()
                    .map(|m| match m {
                        AxisMode::Sine { len, .. } => (std::f64::consts::PI / len).powi(2),
                        AxisMode::Gauss { .. } => unreachable!(),
                    })
                    .sum();
                Some(Self { lambda, axes })
            }
            TrapPotential::Quadratic {
                center,
                coefficients,
                offset,
            } => {
                let axes: Vec<AxisMode> = center
                    .iter()
                    .zip(coefficients)
                    .map(|(c, k)| AxisMode::Gauss {
                        center: *c,
                        s: k.sqrt(),
                    })
                    .collect();
                let lambda = offset + coefficients.iter().map(|k| k.sqrt()).sum::<f64>();
                Some(Self { lambda, axes })
            }
            _ => None,
        }
    }

    /// `φ(x)` normalized in `L²`.
    pub fn phi(&self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        self.axes
            .iter()
            .zip(x)
            .map(|(m, &x)| match *m {
                AxisMode::Sine { lo, len } => {
                    if x <= lo || x >= lo + len {
                        0.0
                    } else {
                        (2.0 / len).sqrt() * (PI * (x - lo) / len).sin()
                    }
                }
                AxisMode::Gauss { center, s } => (s / PI).powf(0.25) * (-s * (x - center).powi(2) / 2.0).exp(),
            })
            .product()
    }

    /// `∫_{-∞}^x φ²` along a single axis.
    fn cdf(&self, axis: usize, x: f64) -> f64 {
        use std::f64::consts::PI;
        match self.axes[axis] {
            AxisMode::Sine { lo, len } => {
                let t = (x - lo).clamp(0.0, len);
                (t - len / (2.0 * PI) * (2.0 * PI * t / len).sin()) / len
            }
            AxisMode::Gauss { center, s } => 0.5 * (1.0 + erf(s.sqrt() * (x - center))),
        }
    }

    /// Exact `φ²` mass of each nearest-node cell of a 1D grid.
    pub fn cell_masses(&self, grid: &Grid) -> Option<Vec<f64>> {
        if grid.dim() != 1 || self.axes.len() != 1 {
            return None;
        }
        let h = grid.spacing(0);
        let (lo, hi) = (grid.lower()[0], grid.upper()[0]);
        Some(
            (0..grid.len())
                .map(|i| {
                    let x = grid.coord(0, i);
                    let a = if i == 0 { f64::NEG_INFINITY } else { (x - h / 2.0).max(lo) };
                    let b = if i + 1 == grid.len() { f64::INFINITY } else { (x + h / 2.0).min(hi) };
                    self.cdf(0, b) - self.cdf(0, a)
                })
                .collect(),
        )
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Ground state; eigenvalue and shape against the closed form when known.
pub fn eigen_checks(
    prefix: &str,
    p: &Problem,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<(Vec<Check>, SpectralResult)> {
    let s = ground_state(&p.w, &p.grid)?;
    art.write(&format!("{prefix}_phi.csv"), |o| s.write_phi_csv(o))?;
    let mut checks = vec![Check::at_most(format!("{prefix}.residual"), s.residual, 1e-8)];
    if let Some(a) = Analytic::of(&p.w) {
        checks.push(
            Check::at_most(format!("{prefix}.eigenvalue_error"), (s.lambda - a.lambda).abs(), tol.eigenvalue)
                .with_detail(format!("lambda={} exact={}", s.lambda, a.lambda)),
        );
        let sup = (0..p.grid.len())
            .map(|i| (s.phi[i] - a.phi(&p.grid.node(i))).abs())
            .fold(0.0f64, f64::max);
        checks.push(Check::at_most(format!("{prefix}.phi_sup_error"), sup, tol.phi_sup));
    }
    Ok((checks, s))
}

/// `-log λ_T` against `β λ` for the canonical choice `m = dx`, `g = p_β`.
pub fn trace_consistency(prefix: &str, p: &Problem, lambda: f64, tol: &Tolerances) -> anyhow::Result<(Check, f64)> {
    let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
    let m = DiscreteMeasure::lebesgue(p.grid.clone());
    let sol = solve_symmetric(&k, &PairWeight::FreeKernel, &m)?;
    let lhs = -sol.lambda_t.ln();
    let rhs = p.beta * lambda;
    let rel = (lhs - rhs).abs() / rhs.abs();
    Ok((
        Check::at_most(format!("{prefix}.log_root_rel_error"), rel, tol.trace_rel)
            .with_detail(format!("-log lambda_T={lhs} beta*lambda={rhs}")),
        lhs,
    ))
}

/// Sinkhorn with the eigen-based marginal against `q*`, the factorization,
/// the objective value and random probes.
pub fn bridge_checks(
    prefix: &str,
    p: &Problem,
    tol: &Tolerances,
    probes: usize,
    seed: u64,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
    let m = p.admissible_nodes();
    let g = PairWeight::FreeKernel;
    let sol = solve_symmetric(&k, &g, &m)?;
    let nu = sol.marginal(&m)?;
    let kernel = mass_kernel(&k, &g, &m)?;
    let sk = sinkhorn_bridge(&kernel, &nu, &nu, tol.sinkhorn)?;
    let tv = sk.q.tv_distance(sol.q_star())?;
    let fact = factorization_check(&sk.q, &kernel)?;
    let fact_star = factorization_check(sol.q_star(), &kernel)?;
    let lhs = -sol.lambda_t.ln();
    let obj_err = (sol.objective - lhs).abs();
    let probe_margin = probe_margin(&sol.q_star().clone(), &m, &k, &g, sol.objective, probes, seed)?;

    art.write(&format!("{prefix}_q_star.csv"), |o| sol.q_star().write_csv(o))?;
    art.write(&format!("{prefix}_sinkhorn_errors.csv"), |o| {
        write_table_csv(o, &p.meta(None), &["sweep", "error"], sk.errors.iter().enumerate().map(|(i, e)| vec![i as f64, *e]))
    })?;
    if let Some(path) = art.record(&format!("{prefix}_sinkhorn_potentials.json")) {
        sk.write_potentials_json(&path)?;
    }
    Ok(vec![
        Check::at_most(format!("{prefix}.sinkhorn_vs_eigen_tv"), tv, tol.coupling_tv)
            .with_detail(format!("{} sweeps", sk.iterations)),
        Check::at_most(format!("{prefix}.factorization_sinkhorn"), fact, tol.factorization),
        Check::at_most(format!("{prefix}.factorization_eigen"), fact_star, tol.factorization),
        Check::at_most(format!("{prefix}.objective_vs_log_root"), obj_err, tol.objective)
            .with_detail(format!("objective={} -log lambda_T={lhs}", sol.objective)),
        Check::at_most(format!("{prefix}.probe_margin"), probe_margin, 0.0)
            .with_detail(format!("largest objective(q*) - objective(probe) over {probes} probes")),
    ])
}

/// `max_probe (objective(q*) - objective(probe))` over symmetric multiplicative
/// perturbations of `q*` at several scales; negative when `q*` wins.
fn probe_margin(
    q: &PairMeasure,
    m: &DiscreteMeasure,
    k: &FKKernel,
    g: &PairWeight,
    best: f64,
    probes: usize,
    seed: u64,
) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qm = q.masses();
    let n = qm.nrows();
    let mut margin = f64::NEG_INFINITY;
    for t in 0..probes {
        let scale = [0.01, 0.1, 0.5, 1.0][t % 4];
        let mut noise = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let f = (scale * rng.random_range(-1.0..1.0f64)).exp();
                noise[[i, j]] = f;
                noise[[j, i]] = f;
            }
        }
        let pm = &qm * &noise;
        let total = pm.sum();
        let probe = PairMeasure::from_masses(q.grid().clone(), pm / total)?;
        let v = schrodinger_objective(&probe, m, k, g)?;
        margin = margin.max(best - v);
    }
    Ok(margin)
}

/// `h_N` by the cycle recursion against the permutation sum on a small kernel.
pub fn recursion_check(prefix: &str, k: &FKKernel, n_max: usize, tol: &Tolerances) -> anyhow::Result<Check> {
    let a = k.scaled();
    let mut powers = vec![a.clone()];
    for l in 1..n_max {
        powers.push(powers[l - 1].dot(&a));
    }
    let traces: Vec<f64> = powers.iter().map(|p| p.diag().sum()).collect();
    let mut worst = 0.0f64;
    for n in 1..=n_max {
        let mut total = 0.0;
        let mut count = 0usize;
        for sigma in (0..n).permutations(n) {
            total += cycle_type(&sigma).iter().map(|&l| traces[l - 1]).product::<f64>();
            count += 1;
        }
        let brute = total / count as f64;
        let rec = sym_trace_exact(k, n)?;
        worst = worst.max((rec - brute).abs() / brute.abs());
    }
    Ok(Check::at_most(format!("{prefix}.max_rel_error"), worst, tol.recursion_rel)
        .with_detail(format!("{} nodes, N <= {n_max}", k.grid.len())))
}

/// Free energy `-(1/N) log h_N` against `β λ`; the last six errors must not grow.
pub fn free_energy_checks(
    prefix: &str,
    p: &Problem,
    n_max: usize,
    lambda: f64,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
    let curve = free_energy_curve(&k, n_max)?;
    let target = p.beta * lambda;
    let errors: Vec<f64> = curve.iter().map(|v| (v - target).abs() / target.abs()).collect();
    art.write(&format!("{prefix}_free_energy.csv"), |o| {
        write_table_csv(
            o,
            &p.meta(None),
            &["N", "free_energy", "beta_lambda", "rel_error"],
            curve.iter().zip(&errors).enumerate().map(|(i, (v, e))| vec![(i + 1) as f64, *v, target, *e]),
        )
    })?;
    let tail = &errors[errors.len().saturating_sub(6)..];
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    Ok(vec![
        Check::at_most(format!("{prefix}.final_rel_error"), *errors.last().unwrap(), tol.free_energy_rel)
            .with_detail(format!("N={n_max} value={} target={target}", curve.last().unwrap())),
        Check::holds(format!("{prefix}.tail_nonincreasing"), monotone),
    ])
}

/// `E_x[D_β] = 1` at each start point.
#[allow(clippy::too_many_arguments)]
pub fn martingale_checks(
    prefix: &str,
    p: &Problem,
    s: &SpectralResult,
    starts: &[f64],
    n_samples: usize,
    steps: usize,
    plan: SeedPlan,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (i, &x) in starts.iter().enumerate() {
        let point = vec![x; p.grid.dim()];
        let est = martingale_check(&point, p.beta, s.lambda, s, &p.w, n_samples, steps, plan.fork(i as u64))?;
        let z = est.z_score(1.0);
        rows.push(vec![x, est.mean, est.std_error, z]);
        checks.push(
            Check::at_most(format!("{prefix}.z_at_{i}"), z, tol.z_score)
                .with_detail(format!("x={x} mean={} se={}", est.mean, est.std_error)),
        );
    }
    art.write(&format!("{prefix}_martingale.csv"), |o| {
        write_table_csv(o, &p.meta(Some(plan.seed)), &["x", "mean", "std_error", "z"], rows)
    })?;
    Ok(checks)
}

/// Occupation of one ergodic chain started from `φ²` against `φ²` (closed
/// form per cell when available, else the grid ground state).
#[allow(clippy::too_many_arguments)]
pub fn occupation_checks(
    prefix: &str,
    p: &Problem,
    s: &SpectralResult,
    t_total: f64,
    dt: f64,
    plan: SeedPlan,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    let drift = ground_state_drift(s)?;
    let init = s.density()?;
    let run = ergodic_occupation(&drift, &p.w, &init, t_total, dt, 1, plan)?;
    let occ = run.occupation(&p.grid)?.masses();
    let (exact, source) = match Analytic::of(&p.w).and_then(|a| a.cell_masses(&p.grid)) {
        Some(e) => (e, "closed form"),
        None => (init.masses(), "grid ground state"),
    };
    let dist = l1(&occ, &exact);
    art.write(&format!("{prefix}_occupation.csv"), |o| {
        write_table_csv(
            o,
            &p.meta(Some(plan.seed)),
            &["x0", "occupation", "phi_squared"],
            (0..p.grid.len()).map(|i| vec![p.grid.node(i)[0], occ[i], exact[i]]),
        )
    })?;
    art.write(&format!("{prefix}_drift.csv"), |o| {
        write_table_csv(
            o,
            &p.meta(None),
            &["x0", "drift0"],
            (0..p.grid.len()).map(|i| vec![p.grid.node(i)[0], drift.at_node(i)[0]]),
        )
    })?;
    Ok(vec![
        Check::at_most(format!("{prefix}.l1_to_phi_squared"), dist, tol.occupation_l1)
            .with_detail(format!("{source}, {} steps, dt above h^2/4: {}", run.steps, run.coarse_dt)),
        Check::at_most(format!("{prefix}.rejection_rate"), run.rejection_rate(), 0.5),
    ])
}

/// Smooth bounded test function: two random Fourier modes and a bump.
pub fn random_smooth_f(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a1, k1, p1) = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0), rng.random_range(0.0..6.3));
    let (a2, k2, p2) = (rng.random_range(-0.5..0.5), rng.random_range(0.2..2.0), rng.random_range(0.0..6.3));
    let (b, c, s) = (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..3.0));
    (0..grid.len())
        .map(|i| {
            let x = grid.node(i);
            x.iter()
                .map(|&x| {
                    a1 * (k1 * x + p1).sin() + a2 * (k2 * x + p2).cos() + b * (-(x - c) * (x - c) / s).exp()
                })
                .sum()
        })
        .collect()
}

/// Duality gaps for `f ≡ 0`, `f ≡ c` and `n_random` smooth `f`.
pub fn duality_checks(
    prefix: &str,
    p: &Problem,
    n_random: usize,
    seed: u64,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    let n = p.grid.len();
    let mut fs = vec![("zero".to_string(), vec![0.0; n]), ("constant".to_string(), vec![0.4; n])];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_random {
        fs.push((format!("random_{i:02}"), random_smooth_f(&p.grid, &mut rng)));
    }
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (k, (name, f)) in fs.iter().enumerate() {
        let c = dv_duality_check(f, &p.w, &p.grid, SeedPlan::new(seed).fork(k as u64))?;
        rows.push(vec![k as f64, c.lambda_minus, c.direct_sup, c.gap]);
        checks.push(Check::at_most(format!("{prefix}.gap_{name}"), c.gap, tol.duality_gap));
    }
    art.write(&format!("{prefix}_gaps.csv"), |o| {
        write_table_csv(o, &p.meta(Some(seed)), &["f_index", "lambda_minus", "direct_sup", "gap"], rows)
    })?;
    Ok(checks)
}

/// Nodes per axis of the histogram on which ensemble and sampler marginals are compared.
const HIST_NODES: usize = 11;

/// Time-`β/2` marginal of the weighted symmetrized ensemble for each `N`
/// against the sampler from the minimizing path measure (`g ≡ 1`, `m`
/// uniform on admissible nodes), histogrammed on `HIST_NODES` nodes per axis.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_convergence(
    prefix: &str,
    p: &Problem,
    particle_counts: &[usize],
    steps: usize,
    n_samples: usize,
    plan: SeedPlan,
    tol: &Tolerances,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<Check>> {
    ensure!(!particle_counts.is_empty(), "no particle numbers given");
    let bounds: Vec<(f64, f64)> = p.grid.lower().iter().copied().zip(p.grid.upper().iter().copied()).collect();
    let hist = Grid::new(&bounds, HIST_NODES.min(p.grid.points_per_axis()))?;
    let m = p.admissible_nodes().normalized()?;
    let k = fk_kernel_grid(&p.w, p.beta, &p.grid, None)?;
    let sol = solve_symmetric(&k, &PairWeight::Unit, &m)?;
    let sampler = schrodinger_process_sampler(sol.q_star(), &k, &p.w, steps, n_samples, plan.fork(1000))?;
    let half = p.beta / 2.0;
    let target = sampler.marginal(&hist, half)?;
    art.write(&format!("{prefix}_sampler_marginal.csv"), |o| target.write_csv(o))?;
    let mut tvs = Vec::new();
    let mut rows = Vec::new();
    for &n in particle_counts {
        let spec = EnsembleSpec::new(m.clone(), n, p.beta, steps, p.w.clone())?.with_pair_weight(PairWeight::Unit)?;
        let est = run_ensemble(&spec, n_samples, plan.fork(n as u64), &hist, &[half])
            .with_context(|| format!("ensemble with N={n}"))?;
        let tv = measure_distance(&est.l_marginals[0], &target)?.total_variation;
        art.write(&format!("{prefix}_l_marginal_n{n:02}.csv"), |o| est.l_marginals[0].write_csv(o))?;
        rows.push(vec![n as f64, tv, est.effective_sample_size]);
        tvs.push(tv);
    }
    art.write(&format!("{prefix}_tv.csv"), |o| {
        write_table_csv(o, &p.meta(Some(plan.seed)), &["N", "tv", "ess"], rows)
    })?;
    let decreasing = tvs.windows(2).all(|w| w[1] < w[0]);
    let last = *particle_counts.last().unwrap();
    Ok(vec![
        Check::at_most(format!("{prefix}.tv_at_n{last}"), *tvs.last().unwrap(), tol.ensemble_tv)
            .with_detail(format!("TV by N: {tvs:?}; sampler ESS {:.0}", sampler.effective_sample_size)),
        Check::holds(format!("{prefix}.tv_decreasing_in_n"), decreasing),
        Check::holds(format!("{prefix}.sampler_ess_ok"), !sampler.low_ess),
    ])
}
