//! Brownian bridges for the generator `Δ` (variance `2t` per coordinate) and
//! their Feynman–Kac weights.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::potential::TrapPotential;
use crate::sampling::{McEstimate, Moments, SeedPlan};

/// Free heat kernel `(4πβ)^{-d/2} exp(-|x-y|^2 / 4β)`.
pub fn gauss_kernel(x: &[f64], y: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(gauss_density(x, y, beta))
}

pub(crate) fn gauss_density(x: &[f64], y: &[f64], beta: f64) -> f64 {
    let d = x.len() as f64;
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (4.0 * std::f64::consts::PI * beta).powf(-d / 2.0) * (-r2 / (4.0 * beta)).exp()
}

/// A time-discretized path with its Feynman–Kac log-weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    dim: usize,
    times: Vec<f64>,
    /// Flat positions, stride `dim`, `times.len()` points.
    positions: Vec<f64>,
    /// `-∫ W(ω_s) ds` once a potential is attached; 0 before.
    pub log_weight: f64,
}

impl PathSample {
    pub fn new(dim: usize, times: Vec<f64>, positions: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || positions.len() != times.len() * dim {
            return Err(Error::InvalidArgument(
                "path needs at least two time points and matching positions".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("path times must increase".into()));
        }
        Ok(Self {
            dim,
            times,
            positions,
            log_weight: 0.0,
        })
    }

    /// Path that sits at `x` for the whole horizon.
    pub fn constant(x: &[f64], beta: f64, steps: usize) -> Result<Self> {
        let times = uniform_times(beta, steps);
        let positions = x.iter().copied().cycle().take(x.len() * times.len()).collect();
        Self::new(x.len(), times, positions)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn start(&self) -> &[f64] {
        self.position(0)
    }

    pub fn end(&self) -> &[f64] {
        self.position(self.steps())
    }

    /// Index of the mesh time nearest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let k = self
            .times
            .partition_point(|s| *s < t)
            .min(self.times.len() - 1);
        if k > 0 && (t - self.times[k - 1]).abs() <= (self.times[k] - t).abs() {
            k - 1
        } else {
            k
        }
    }

    /// Computes and stores the log Feynman–Kac weight for `w`.
    pub fn attach_weight(&mut self, w: &TrapPotential) {
        self.log_weight = log_fk_weight(self, w);
    }
}

fn uniform_times(beta: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            if k == steps {
                beta
            } else {
                beta * k as f64 / steps as f64
            }
        })
        .collect()
}

/// Exact Brownian bridge from `x` to `y` on `[0, β]` with `steps` equal steps.
///
/// Marginal at time `t`: mean `x + (t/β)(y-x)`, variance `2t(β-t)/β` per axis.
pub fn sample_bridge<R: Rng + ?Sized>(
    x: &[f64],
    y: &[f64],
    beta: f64,
    steps: usize,
    rng: &mut R,
) -> Result<PathSample> {
    check_path_args(x, beta, steps)?;
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("bridge endpoints differ in dimension".into()));
    }
    let d = x.len();
    let times = uniform_times(beta, steps);
    let mut pos = Vec::with_capacity((steps + 1) * d);
    pos.extend_from_slice(x);
    let mut cur = x.to_vec();
    for k in 0..steps - 1 {
        let remaining = beta - times[k];
        let dt = times[k + 1] - times[k];
        let frac = dt / remaining;
        let sd = (2.0 * dt * (remaining - dt) / remaining).sqrt();
        for a in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            cur[a] += frac * (y[a] - cur[a]) + sd * z;
        }
        pos.extend_from_slice(&cur);
    }
    pos.extend_from_slice(y);
    PathSample::new(d, times, pos)
}

/// Free Brownian path from `x` with transition variance `2t`.
pub fn sample_free_path<R: Rng + ?Sized>(
    x: &[f64],
    beta: f64,
    steps: usize,
    rng: &mut R,
) -> Result<PathSample> {
    check_path_args(x, beta, steps)?;
    let d = x.len();
    let times = uniform_times(beta, steps);
    let mut pos = Vec::with_capacity((steps + 1) * d);
    pos.extend_from_slice(x);
    let mut cur = x.to_vec();
    for k in 0..steps {
        let sd = (2.0 * (times[k + 1] - times[k])).sqrt();
        for c in cur.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += sd * z;
        }
        pos.extend_from_slice(&cur);
    }
    PathSample::new(d, times, pos)
}

fn check_path_args(x: &[f64], beta: f64, steps: usize) -> Result<()> {
    if steps < 1 {
        return Err(Error::InvalidArgument("need at least one time step".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty start point".into()));
    }
    Ok(())
}

/// `-∫ W(ω_s) ds` by the trapezoid rule on the path mesh.
///
/// For hard walls the weight is the probability that the Brownian bridge
/// between consecutive mesh points stays inside the box, so the result is
/// the exact conditional killing weight given the mesh points (up to the
/// double-crossing term, which is `O(exp(-L^2/δ))`).
pub fn log_fk_weight(path: &PathSample, w: &TrapPotential) -> f64 {
    if let Some((lower, upper)) = w.hard_wall_box() {
        return log_hard_wall_survival(path, lower, upper);
    }
    let mut acc = 0.0;
    let mut prev = w.eval(path.position(0));
    if prev.is_infinite() {
        return f64::NEG_INFINITY;
    }
    for k in 1..path.times.len() {
        let cur = w.eval(path.position(k));
        if cur.is_infinite() {
            return f64::NEG_INFINITY;
        }
        acc += 0.5 * (prev + cur) * (path.times[k] - path.times[k - 1]);
        prev = cur;
    }
    -acc
}

fn log_hard_wall_survival(path: &PathSample, lower: &[f64], upper: &[f64]) -> f64 {
    let d = path.dim;
    let inside = |p: &[f64]| (0..d).all(|a| p[a] >= lower[a] && p[a] <= upper[a]);
    if !(0..path.times.len()).all(|k| inside(path.position(k))) {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for k in 1..path.times.len() {
        let dt = path.times[k] - path.times[k - 1];
        let (p, q) = (path.position(k - 1), path.position(k));
        for a in 0..d {
            // Crossing probability of a level for the bridge of variance 2t.
            for (dp, dq) in [(p[a] - lower[a], q[a] - lower[a]), (upper[a] - p[a], upper[a] - q[a])] {
                let cross = (-(dp * dq) / dt).exp();
                if cross >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                acc += (-cross).ln_1p();
            }
        }
    }
    acc
}

/// Feynman–Kac weight `exp(-∫ W)` in `[0, 1]`.
pub fn feynman_kac_weight(path: &PathSample, w: &TrapPotential) -> f64 {
    log_fk_weight(path, w).exp()
}

/// Monte Carlo estimate of `E^β_{x,y}[exp(-∫ W)]` over normalized bridges.
pub fn bridge_fk_mc(
    x: &[f64],
    y: &[f64],
    beta: f64,
    w: &TrapPotential,
    n_samples: usize,
    steps: usize,
    plan: SeedPlan,
) -> Result<McEstimate> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    w.check_dim(x.len())?;
    let parts = plan.map_chunks(n_samples, |rng, range| -> Result<Moments> {
        let mut m = Moments::default();
        for _ in range {
            let path = sample_bridge(x, y, beta, steps, rng)?;
            m.push(feynman_kac_weight(&path, w));
        }
        Ok(m)
    });
    let mut total = Moments::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.estimate())
}
