//! The ground-state diffusion `dX = 2∇φ/φ dt + √2 dB`, its Girsanov density
//! against free motion, and path sampling from the minimizing path measure.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{log_fk_weight, sample_bridge, sample_free_path, PathSample};
use crate::error::{Error, Result};
use crate::io;
use crate::kernel::FKKernel;
use crate::measure::{DiscreteMeasure, Grid, PairMeasure};
use crate::potential::TrapPotential;
use crate::sampling::{McEstimate, Moments, SeedPlan};
use crate::spectral::SpectralResult;

const MAX_REDRAWS: usize = 10_000;

/// Nodal values of `2∇φ/φ`, stride `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftField {
    pub grid: Grid,
    pub values: Vec<f64>,
    /// Below this `φ` the drift is clamped to `2/h` per axis.
    pub phi_floor: f64,
}

impl DriftField {
    /// Multilinear interpolation of the drift at `x`, written into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        if d == 1 {
            out[0] = match self.grid.locate(0, x[0]) {
                Some((i, f)) => self.values[i] * (1.0 - f) + self.values[i + 1] * f,
                None => 0.0,
            };
            return;
        }
        let (Some((i, fx)), Some((j, fy))) = (self.grid.locate(0, x[0]), self.grid.locate(1, x[1]))
        else {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        };
        let n = self.grid.points_per_axis();
        let v = |r: usize, c: usize, a: usize| self.values[(r * n + c) * d + a];
        for (a, o) in out.iter_mut().enumerate() {
            *o = (1.0 - fx) * ((1.0 - fy) * v(i, j, a) + fy * v(i, j + 1, a))
                + fx * ((1.0 - fy) * v(i + 1, j, a) + fy * v(i + 1, j + 1, a));
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.dim()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn at_node(&self, i: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[i * d..(i + 1) * d]
    }
}

/// Drift of the `φ`-transformed diffusion by central differences
/// (one-sided on the grid boundary).
pub fn ground_state_drift(phi: &SpectralResult) -> Result<DriftField> {
    let grid = &phi.grid;
    let p = &phi.phi;
    if p.len() != grid.len() {
        return Err(Error::GridMismatch("phi length differs from grid".into()));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonPositive("phi must be finite and nonnegative".into()));
    }
    let max = p.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(max > 0.0) {
        return Err(Error::NonPositive("phi vanishes everywhere".into()));
    }
    let floor = 1e-12 * max;
    let d = grid.dim();
    let n = grid.points_per_axis();
    let mut values = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        let mi = grid.multi_index(i);
        for a in 0..d {
            let h = grid.spacing(a);
            let step = |k: usize| {
                let mut m = mi;
                m[a] = k;
                p[grid.flat_index(&m[..d])]
            };
            let ia = mi[a];
            let grad = if ia == 0 {
                (step(1) - p[i]) / h
            } else if ia == n - 1 {
                (p[i] - step(n - 2)) / h
            } else {
                (step(ia + 1) - step(ia - 1)) / (2.0 * h)
            };
            let cap = 2.0 / h;
            values[i * d + a] = if p[i] >= floor {
                2.0 * grad / p[i]
            } else if grad == 0.0 {
                0.0
            } else {
                (2.0 * grad / p[i]).clamp(-cap, cap)
            };
        }
    }
    Ok(DriftField {
        grid: grid.clone(),
        values,
        phi_floor: floor,
    })
}

/// Occupation statistics of one or more Euler–Maruyama chains.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeRun {
    /// Recorded `(time, position)` pairs, empty unless recording was asked for.
    pub trajectory: Vec<(f64, Vec<f64>)>,
    /// Nearest-node counts, one per visited position including the start.
    pub counts: Vec<f64>,
    pub steps: usize,
    pub rejections: usize,
    /// `dt` exceeds `h²/4` on the drift grid.
    pub coarse_dt: bool,
}

impl SdeRun {
    pub fn rejection_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.rejections as f64 / (self.steps + self.rejections) as f64
        }
    }

    /// More than half of all proposed moves left the domain.
    pub fn flagged(&self) -> bool {
        self.rejection_rate() > 0.5
    }

    pub fn occupation(&self, grid: &Grid) -> Result<DiscreteMeasure> {
        DiscreteMeasure::from_masses(grid.clone(), &self.counts)
    }

    fn merge(mut self, other: SdeRun) -> SdeRun {
        self.counts.iter_mut().zip(other.counts).for_each(|(a, b)| *a += b);
        self.steps += other.steps;
        self.rejections += other.rejections;
        self.coarse_dt |= other.coarse_dt;
        self
    }
}

/// Domain where the chain may move: the hard-wall box intersected with the
/// drift grid, or the grid box for soft potentials.
fn admissible(grid: &Grid, w: &TrapPotential) -> (Vec<f64>, Vec<f64>) {
    let mut lo = grid.lower().to_vec();
    let mut hi = grid.upper().to_vec();
    if let Some((wl, wu)) = w.hard_wall_box() {
        for a in 0..lo.len() {
            lo[a] = lo[a].max(wl[a]);
            hi[a] = hi[a].min(wu[a]);
        }
    }
    (lo, hi)
}

/// One Euler–Maruyama chain with noise `√(2dt)` per axis, started from a node
/// drawn from `init`. Moves leaving the domain are redrawn and counted.
/// `record_every = k > 0` keeps every `k`-th position.
pub fn simulate_ergodic_sde<R: Rng + ?Sized>(
    drift: &DriftField,
    w: &TrapPotential,
    init: &DiscreteMeasure,
    t_total: f64,
    dt: f64,
    record_every: usize,
    rng: &mut R,
) -> Result<SdeRun> {
    let grid = &drift.grid;
    grid.ensure_same(init.grid(), "initial measure")?;
    w.check_dim(grid.dim())?;
    if !(dt > 0.0) || !(t_total >= 0.0) {
        return Err(Error::InvalidArgument("need dt > 0 and T_total >= 0".into()));
    }
    let start = WeightedIndex::new(init.weights())
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from init: {e}")))?
        .sample(rng);
    let d = grid.dim();
    let mut x = grid.node(start);
    let (lo, hi) = admissible(grid, w);
    let inside = |p: &[f64]| (0..d).all(|a| p[a] > lo[a] && p[a] < hi[a]);
    if !inside(&x) {
        return Err(Error::SupportMismatch(format!(
            "initial node {start} is not inside the admissible domain"
        )));
    }
    let n_steps = (t_total / dt).round() as usize;
    let sd = (2.0 * dt).sqrt();
    let mut counts = vec![0.0; grid.len()];
    let mut trajectory = Vec::new();
    let mut rejections = 0;
    let mut b = vec![0.0; d];
    let mut y = vec![0.0; d];
    counts[grid.nearest_node(&x)] += 1.0;
    if record_every > 0 {
        trajectory.push((0.0, x.clone()));
    }
    for k in 1..=n_steps {
        drift.eval_into(&x, &mut b);
        let mut tries = 0;
        loop {
            for a in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                y[a] = x[a] + b[a] * dt + sd * z;
            }
            if inside(&y) {
                break;
            }
            rejections += 1;
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::NotConverged {
                    what: "wall rejection",
                    iterations: tries,
                    residual: f64::NAN,
                });
            }
        }
        std::mem::swap(&mut x, &mut y);
        counts[grid.nearest_node(&x)] += 1.0;
        if record_every > 0 && k % record_every == 0 {
            trajectory.push((k as f64 * dt, x.clone()));
        }
    }
    let h = grid.min_spacing();
    Ok(SdeRun {
        trajectory,
        counts,
        steps: n_steps,
        rejections,
        coarse_dt: dt > h * h / 4.0,
    })
}

/// Pools `n_chains` independent chains of length `t_total`, chain `k` on
/// stream `k` of `plan`.
pub fn ergodic_occupation(
    drift: &DriftField,
    w: &TrapPotential,
    init: &DiscreteMeasure,
    t_total: f64,
    dt: f64,
    n_chains: usize,
    plan: SeedPlan,
) -> Result<SdeRun> {
    if n_chains < 1 {
        return Err(Error::InvalidArgument("need at least one chain".into()));
    }
    let per_chain = SeedPlan::with_chunk(plan.seed, 1);
    let runs = per_chain.map_chunks(n_chains, |rng, _| {
        simulate_ergodic_sde(drift, w, init, t_total, dt, 0, rng)
    });
    let mut runs = runs.into_iter();
    let mut total = runs.next().expect("at least one chain")?;
    for r in runs {
        total = total.merge(r?);
    }
    Ok(total)
}

/// Writes a recorded trajectory as `(t, x0, ...)` rows.
pub fn write_trajectory_csv<W: Write>(run: &SdeRun, dt: f64, out: W) -> Result<()> {
    let d = run.trajectory.first().map_or(1, |(_, x)| x.len());
    let meta = vec![
        ("dt".to_string(), io::fmt_f64(dt)),
        ("steps".to_string(), run.steps.to_string()),
        ("rejections".to_string(), run.rejections.to_string()),
    ];
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|a| format!("x{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = run.trajectory.iter().map(|(t, x)| {
        let mut r = vec![*t];
        r.extend_from_slice(x);
        r
    });
    io::write_table_csv(out, &meta, &header, rows)
}

/// `exp(-∫(W-λ)) φ(end)/φ(start)` along `path`, `φ` interpolated on its grid.
pub fn girsanov_density(
    path: &PathSample,
    lambda: f64,
    phi: &SpectralResult,
    w: &TrapPotential,
) -> Result<f64> {
    let p0 = phi.grid.interpolate(&phi.phi, path.start());
    if !(p0 > 0.0) {
        return Err(Error::SupportMismatch("path starts where phi vanishes".into()));
    }
    let log_fk = log_fk_weight(path, w);
    if log_fk == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let p1 = phi.grid.interpolate(&phi.phi, path.end());
    Ok((log_fk + lambda * path.horizon()).exp() * p1 / p0)
}

/// Monte Carlo `E_x[D_β]` over free paths with `steps` mesh intervals.
#[allow(clippy::too_many_arguments)]
pub fn martingale_check(
    x: &[f64],
    beta: f64,
    lambda: f64,
    phi: &SpectralResult,
    w: &TrapPotential,
    n_samples: usize,
    steps: usize,
    plan: SeedPlan,
) -> Result<McEstimate> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if !(phi.grid.interpolate(&phi.phi, x) > 0.0) {
        return Err(Error::SupportMismatch("start point where phi vanishes".into()));
    }
    let parts = plan.map_chunks(n_samples, |rng, range| -> Result<Moments> {
        let mut m = Moments::default();
        for _ in range {
            let path = sample_free_path(x, beta, steps, rng)?;
            m.push(girsanov_density(&path, lambda, phi, w)?);
        }
        Ok(m)
    });
    let mut total = Moments::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.estimate())
}

/// Equal-weight paths drawn from `∫∫ Q_{x,y} q(dx,dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchrodingerPaths {
    pub paths: Vec<PathSample>,
    /// `(start node, end node)` of each returned path.
    pub pairs: Vec<(usize, usize)>,
    /// Kish effective sample size of the candidate pool.
    pub effective_sample_size: f64,
    pub candidates: usize,
    /// Effective sample size fell below 10% of the request.
    pub low_ess: bool,
}

impl SchrodingerPaths {
    /// Nearest-node histogram at the mesh time closest to `t`.
    pub fn marginal(&self, grid: &Grid, t: f64) -> Result<DiscreteMeasure> {
        let mut counts = vec![0.0; grid.len()];
        for p in &self.paths {
            counts[grid.nearest_node(p.position(p.time_index(t)))] += 1.0;
        }
        DiscreteMeasure::from_masses(grid.clone(), &counts)
    }

    /// Empirical law of `(X_0, X_β)` on node pairs.
    pub fn endpoint_coupling(&self, grid: &Grid) -> Result<PairMeasure> {
        let n = grid.len();
        let mut m = ndarray::Array2::<f64>::zeros((n, n));
        for &(i, j) in &self.pairs {
            m[[i, j]] += 1.0;
        }
        let total = m.sum();
        PairMeasure::from_masses(grid.clone(), m / total)
    }
}

/// Draws `(x,y) ~ q`, a bridge `x -> y`, and reweights it by
/// `exp(-∫W) / E_{x,y}[exp(-∫W)]`, the denominator read off `k`. Ten
/// candidates per requested path are systematically resampled.
pub fn schrodinger_process_sampler(
    q: &PairMeasure,
    k: &FKKernel,
    w: &TrapPotential,
    steps: usize,
    n_paths: usize,
    plan: SeedPlan,
) -> Result<SchrodingerPaths> {
    let grid = q.grid();
    grid.ensure_same(&k.grid, "coupling and kernel")?;
    if steps < 2 || n_paths < 1 {
        return Err(Error::InvalidArgument("need at least two steps and one path".into()));
    }
    let ratio = k.free_ratio();
    let n = grid.len();
    let qm = q.masses();
    let pairs = WeightedIndex::new(qm.iter().copied())
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from q: {e}")))?;
    let n_cand = 10 * n_paths;
    let parts = plan.map_chunks(n_cand, |rng, range| -> Result<Vec<(PathSample, usize, f64)>> {
        let mut out = Vec::with_capacity(range.len());
        for _ in range {
            let flat = pairs.sample(rng);
            let (i, j) = (flat / n, flat % n);
            let r = ratio[[i, j]];
            if !(r > 0.0) {
                return Err(Error::SupportMismatch(format!(
                    "q charges the pair ({i},{j}) where the kernel vanishes"
                )));
            }
            let path = sample_bridge(&grid.node(i), &grid.node(j), k.beta, steps, rng)?;
            let wt = log_fk_weight(&path, w).exp() / r;
            out.push((path, flat, wt));
        }
        Ok(out)
    });
    let mut cands = Vec::with_capacity(n_cand);
    for p in parts {
        cands.extend(p?);
    }
    let total: f64 = cands.iter().map(|c| c.2).sum();
    let sq: f64 = cands.iter().map(|c| c.2 * c.2).sum();
    if !(total > 0.0) {
        return Err(Error::Estimation("all candidate weights are zero".into()));
    }
    let ess = total * total / sq;
    // Systematic resampling with one uniform offset.
    let u0: f64 = plan.fork(u64::MAX).stream(0).random::<f64>();
    let mut paths = Vec::with_capacity(n_paths);
    let mut chosen = Vec::with_capacity(n_paths);
    let mut cum = 0.0;
    let mut idx = 0;
    for s in 0..n_paths {
        let target = (u0 + s as f64) / n_paths as f64 * total;
        while idx + 1 < cands.len() && cum + cands[idx].2 <= target {
            cum += cands[idx].2;
            idx += 1;
        }
        paths.push(cands[idx].0.clone());
        chosen.push((cands[idx].1 / n, cands[idx].1 % n));
    }
    Ok(SchrodingerPaths {
        paths,
        pairs: chosen,
        effective_sample_size: ess,
        candidates: n_cand,
        low_ess: ess < 0.1 * n_paths as f64,
    })
}
