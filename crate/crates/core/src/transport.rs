//! The operator `T f(x) = Σ_y f(y) E^β_{x,y}[e^{-W̃}] g(x,y) m(y)`, its Perron
//! pair, the pair measure `q*` it induces, and a fixed-marginal Sinkhorn
//! solver for cross-checking.
//!
//! Matrices here act on node masses: `T[x][y]` already contains the mass
//! `m(y)` of the target node.

use std::io::Write;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bridge::gauss_density;
use crate::error::{Error, Result};
use crate::io;
use crate::kernel::FKKernel;
use crate::measure::{kl_sum, DiscreteMeasure, Grid, PairMeasure};

const POWER_MAX_ITER: usize = 1_000_000;

/// The pair weight `g(x, y)` multiplying the normalized bridge expectation.
#[derive(Clone, Debug, PartialEq)]
pub enum PairWeight {
    /// `g = p_β`, which turns `E^β_{x,y}[e^{-W̃}] g` back into the kernel `K`.
    FreeKernel,
    /// `g ≡ 1`.
    Unit,
    /// Arbitrary positive values on node pairs.
    Custom(Array2<f64>),
}

/// `E^β_{x,y}[e^{-W̃}] · g(x, y)` on node pairs (no measure attached).
pub fn effective_kernel(k: &FKKernel, g: &PairWeight) -> Result<Array2<f64>> {
    match g {
        PairWeight::FreeKernel => Ok(k.matrix.clone()),
        PairWeight::Unit => Ok(k.free_ratio()),
        PairWeight::Custom(values) => {
            let n = k.grid.len();
            if values.dim() != (n, n) {
                return Err(Error::InvalidArgument(format!(
                    "pair weight must be {n}x{n}, got {:?}",
                    values.dim()
                )));
            }
            if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::NonPositive("pair weight g must be positive".into()));
            }
            Ok(k.free_ratio() * values)
        }
    }
}

/// `g = p_β` tabulated on the grid, for use as a custom weight.
pub fn free_kernel_weight(grid: &Grid, beta: f64) -> Array2<f64> {
    let nodes = grid.nodes_flat();
    let d = grid.dim();
    let n = grid.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        gauss_density(&nodes[i * d..(i + 1) * d], &nodes[j * d..(j + 1) * d], beta)
    })
}

/// `T[x][y] = (K/p_β)(x,y) g(x,y) m({y})`.
pub fn build_t_operator(k: &FKKernel, g: &PairWeight, m: &DiscreteMeasure) -> Result<Array2<f64>> {
    k.grid.ensure_same(m.grid(), "T operator")?;
    let keff = effective_kernel(k, g)?;
    let masses = Array1::from(m.masses());
    Ok(keff * &masses)
}

/// Perron root and eigenvector of a nonnegative `T`, with `Σ φ² m = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerronPair {
    pub lambda: f64,
    pub phi: Vec<f64>,
    pub iterations: usize,
    /// `‖Tφ - λφ‖∞ / λ`.
    pub residual: f64,
}

/// Nodes charged by `m` whose row of `T` is not identically zero.
fn support(t: &Array2<f64>, m: &DiscreteMeasure) -> Vec<usize> {
    let w = m.weights();
    (0..t.nrows())
        .filter(|&i| w[i] > 0.0 && t.row(i).iter().any(|v| *v > 0.0))
        .collect()
}

fn components(t: &Array2<f64>, nodes: &[usize]) -> usize {
    let mut pos = vec![usize::MAX; t.nrows()];
    for (k, &i) in nodes.iter().enumerate() {
        pos[i] = k;
    }
    let mut seen = vec![false; nodes.len()];
    let mut count = 0;
    for start in 0..nodes.len() {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            let i = nodes[k];
            for &j in nodes {
                let kj = pos[j];
                if !seen[kj] && (t[[i, j]] > 0.0 || t[[j, i]] > 0.0) {
                    seen[kj] = true;
                    stack.push(kj);
                }
            }
        }
    }
    count
}

/// Power iteration for the Perron pair of `T` on the support of `m`.
pub fn t_eigenpair(t: &Array2<f64>, m: &DiscreteMeasure) -> Result<PerronPair> {
    let n = m.grid().len();
    if t.dim() != (n, n) {
        return Err(Error::GridMismatch("T does not match the grid of m".into()));
    }
    if t.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("T must be nonnegative".into()));
    }
    let nodes = support(t, m);
    if nodes.is_empty() {
        return Err(Error::SupportMismatch("T vanishes on the support of m".into()));
    }
    let c = components(t, &nodes);
    if c > 1 {
        return Err(Error::Reducible { components: c });
    }
    let masses = m.masses();
    let sub = t.select(ndarray::Axis(0), &nodes).select(ndarray::Axis(1), &nodes);

    let mut v = Array1::from_elem(nodes.len(), 1.0);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let w = sub.dot(&v);
        let norm = w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if !(norm > 0.0) {
            return Err(Error::Estimation("T annihilates the iterate".into()));
        }
        let new_lambda = w.dot(&v) / v.dot(&v);
        residual = w
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - new_lambda * b).abs())
            .fold(0.0, f64::max)
            / (new_lambda * v.iter().fold(0.0f64, |a, x| a.max(x.abs())));
        let change = (new_lambda - lambda).abs() / new_lambda;
        lambda = new_lambda;
        v = w / norm;
        if change < 1e-12 && residual < 1e-11 {
            let mut phi = vec![0.0; n];
            for (k, &i) in nodes.iter().enumerate() {
                phi[i] = v[k];
            }
            let s: f64 = phi.iter().zip(&masses).map(|(p, m)| p * p * m).sum();
            phi.iter_mut().for_each(|p| *p /= s.sqrt());
            let tphi = t.dot(&Array1::from(phi.clone()));
            let scale = phi.iter().fold(0.0f64, |a, x| a.max(*x));
            let residual = tphi
                .iter()
                .zip(&phi)
                .map(|(a, b)| (a - lambda * b).abs())
                .fold(0.0, f64::max)
                / (lambda * scale);
            return Ok(PerronPair {
                lambda,
                phi,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NotConverged {
        what: "Perron power iteration",
        iterations: POWER_MAX_ITER,
        residual,
    })
}

/// `q*(x,y) = φ(x) φ(y) (K/p_β)(x,y) g(x,y) m(x) m(y) / λ_T`.
pub fn minimizing_pair_measure(
    pair: &PerronPair,
    k: &FKKernel,
    g: &PairWeight,
    m: &DiscreteMeasure,
) -> Result<PairMeasure> {
    k.grid.ensure_same(m.grid(), "minimizing pair measure")?;
    let keff = effective_kernel(k, g)?;
    let masses = m.masses();
    let n = masses.len();
    let q = Array2::from_shape_fn((n, n), |(i, j)| {
        pair.phi[i] * pair.phi[j] * keff[[i, j]] * masses[i] * masses[j] / pair.lambda
    });
    // Exactly symmetric by construction up to rounding; make it exact.
    let q = (&q + &q.t()) * 0.5;
    PairMeasure::from_masses(m.grid().clone(), q)
}

/// `H(q | q̄⊗m) - Σ q log(K/p_β) - Σ q log g` for a probability `q`.
///
/// `q̄` is the first marginal of `q`. Infinite when `q` charges a pair
/// where `q̄⊗m` or the effective kernel vanishes.
pub fn schrodinger_objective(
    q: &PairMeasure,
    m: &DiscreteMeasure,
    k: &FKKernel,
    g: &PairWeight,
) -> Result<f64> {
    q.grid().ensure_same(m.grid(), "objective")?;
    q.grid().ensure_same(&k.grid, "objective")?;
    let total = q.total_mass();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "objective needs a probability pair measure, total mass {total}"
        )));
    }
    let keff = effective_kernel(k, g)?;
    let qm = q.masses();
    let mm = m.masses();
    let qbar: Vec<f64> = qm.rows().into_iter().map(|r| r.sum()).collect();
    let n = mm.len();
    let reference = (0..n).flat_map(|i| {
        let qb = qbar[i];
        let keff = &keff;
        let mm = &mm;
        (0..n).map(move |j| qb * mm[j] * keff[[i, j]])
    });
    Ok(kl_sum(qm.iter().copied(), reference))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchrodingerSolution {
    pub lambda_t: f64,
    /// `Σ φ_T² m = 1`.
    pub phi_t: Vec<f64>,
    pub objective: f64,
    pub eigen_residual: f64,
    #[serde(skip)]
    pub q_star: Option<PairMeasure>,
}

impl SchrodingerSolution {
    pub fn q_star(&self) -> &PairMeasure {
        self.q_star.as_ref().expect("q_star is set on construction")
    }

    /// `φ_T² m`, the common marginal of `q*`.
    pub fn marginal(&self, m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        let masses: Vec<f64> = self
            .phi_t
            .iter()
            .zip(m.masses())
            .map(|(p, w)| p * p * w)
            .collect();
        DiscreteMeasure::from_masses(m.grid().clone(), &masses)
    }
}

/// Builds `T`, its Perron pair, `q*` and the objective at `q*`.
pub fn solve_symmetric(
    k: &FKKernel,
    g: &PairWeight,
    m: &DiscreteMeasure,
) -> Result<SchrodingerSolution> {
    let t = build_t_operator(k, g, m)?;
    let pair = t_eigenpair(&t, m)?;
    let q = minimizing_pair_measure(&pair, k, g, m)?;
    let objective = schrodinger_objective(&q, m, k, g)?;
    Ok(SchrodingerSolution {
        lambda_t: pair.lambda,
        phi_t: pair.phi,
        objective,
        eigen_residual: pair.residual,
        q_star: Some(q),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSolution {
    /// Coupling `q = diag(a) K diag(b)` in node masses.
    pub q: PairMeasure,
    /// `(log a, log b)`; `-∞` off the supports.
    pub potentials: (Vec<f64>, Vec<f64>),
    pub iterations: usize,
    /// Sup-norm marginal error after each full sweep.
    pub errors: Vec<f64>,
    pub damped: bool,
}

impl SinkhornSolution {
    pub fn write_potentials_json(&self, path: &std::path::Path) -> Result<()> {
        let fmt = |v: &[f64]| -> Vec<Option<f64>> {
            v.iter().map(|x| x.is_finite().then_some(*x)).collect()
        };
        let value = serde_json::json!({
            "log_a": fmt(&self.potentials.0),
            "log_b": fmt(&self.potentials.1),
            "iterations": self.iterations,
            "final_error": self.errors.last(),
            "damped": self.damped,
        });
        io::write_json(path, &value)
    }
}

pub const SINKHORN_MAX_ITER: usize = 100_000;

/// Iterative proportional fitting of `kernel` (node-mass units) to the
/// marginals `nu1`, `nu2`. Stops when the sup-norm mass error of both
/// marginals is below `tol`.
pub fn sinkhorn_bridge(
    kernel: &Array2<f64>,
    nu1: &DiscreteMeasure,
    nu2: &DiscreteMeasure,
    tol: f64,
) -> Result<SinkhornSolution> {
    nu1.grid().ensure_same(nu2.grid(), "sinkhorn marginals")?;
    let n = nu1.grid().len();
    if kernel.dim() != (n, n) {
        return Err(Error::GridMismatch("kernel does not match the marginals' grid".into()));
    }
    if kernel.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("kernel must be finite and nonnegative".into()));
    }
    let (r, c) = (nu1.masses(), nu2.masses());
    for i in 0..n {
        if r[i] > 0.0 && !(0..n).any(|j| c[j] > 0.0 && kernel[[i, j]] > 0.0) {
            return Err(Error::SupportMismatch(format!(
                "row {i} carries mass but its kernel row misses the target support"
            )));
        }
        if c[i] > 0.0 && !(0..n).any(|j| r[j] > 0.0 && kernel[[j, i]] > 0.0) {
            return Err(Error::SupportMismatch(format!(
                "column {i} carries mass but its kernel column misses the source support"
            )));
        }
    }
    let r = Array1::from(r);
    let c = Array1::from(c);
    let kt = kernel.t().to_owned();
    let mut a = Array1::from_elem(n, 1.0);
    let mut b = Array1::from_elem(n, 1.0);
    let ratio = |target: &Array1<f64>, denom: &Array1<f64>| -> Array1<f64> {
        Array1::from_shape_fn(target.len(), |i| {
            if target[i] > 0.0 {
                target[i] / denom[i]
            } else {
                0.0
            }
        })
    };

    let mut errors = Vec::new();
    let mut increases = 0;
    let mut damped = false;
    for it in 1..=SINKHORN_MAX_ITER {
        let new_a = ratio(&r, &kernel.dot(&b));
        a = if damped { geometric_mean(&a, &new_a) } else { new_a };
        let new_b = ratio(&c, &kt.dot(&a));
        b = if damped { geometric_mean(&b, &new_b) } else { new_b };

        let row = &a * &kernel.dot(&b);
        let col = &b * &kt.dot(&a);
        let err = row
            .iter()
            .zip(r.iter())
            .chain(col.iter().zip(c.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if let Some(&prev) = errors.last() {
            if err > prev {
                increases += 1;
                if increases >= 2 {
                    damped = true;
                }
            }
        }
        errors.push(err);
        if err < tol {
            let q = Array2::from_shape_fn((n, n), |(i, j)| a[i] * kernel[[i, j]] * b[j]);
            let q = PairMeasure::from_masses(nu1.grid().clone(), q)?;
            let ln = |v: &Array1<f64>| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
            return Ok(SinkhornSolution {
                q,
                potentials: (ln(&a), ln(&b)),
                iterations: it,
                errors,
                damped,
            });
        }
    }
    Err(Error::NotConverged {
        what: "Sinkhorn scaling",
        iterations: SINKHORN_MAX_ITER,
        residual: errors.last().copied().unwrap_or(f64::NAN),
    })
}

fn geometric_mean(old: &Array1<f64>, new: &Array1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(old.len(), |i| {
        if new[i] == 0.0 {
            0.0
        } else {
            (old[i] * new[i]).sqrt()
        }
    })
}

/// The kernel `K_eff(x,y) m(x) m(y)` in node-mass units.
pub fn mass_kernel(k: &FKKernel, g: &PairWeight, m: &DiscreteMeasure) -> Result<Array2<f64>> {
    k.grid.ensure_same(m.grid(), "mass kernel")?;
    let keff = effective_kernel(k, g)?;
    let masses = m.masses();
    Ok(Array2::from_shape_fn(keff.dim(), |(i, j)| {
        keff[[i, j]] * masses[i] * masses[j]
    }))
}

/// Largest violation of `r(x,y) + r(x',y') - r(x,y') - r(x',y) = 0` for
/// `r = log q - log K`, over the quadruples anchored at the heaviest entry
/// `(x', y')` of `q`. Entries where `q` or `K` vanish are skipped.
pub fn factorization_check(q: &PairMeasure, kernel: &Array2<f64>) -> Result<f64> {
    let qm = q.masses();
    if qm.dim() != kernel.dim() {
        return Err(Error::GridMismatch("kernel and pair measure differ in size".into()));
    }
    let floor = f64::MIN_POSITIVE * 1e20;
    let usable = |i: usize, j: usize| qm[[i, j]] > floor && kernel[[i, j]] > floor;
    let r = |i: usize, j: usize| qm[[i, j]].ln() - kernel[[i, j]].ln();
    let (mut x0, mut y0) = (0, 0);
    for ((i, j), v) in qm.indexed_iter() {
        if *v > qm[[x0, y0]] {
            (x0, y0) = (i, j);
        }
    }
    if !usable(x0, y0) {
        return Err(Error::Estimation("pair measure has no usable entry".into()));
    }
    let (n, m) = qm.dim();
    let mut worst = 0.0f64;
    for x in 0..n {
        if !usable(x, y0) {
            continue;
        }
        for y in 0..m {
            if !usable(x, y) || !usable(x0, y) {
                continue;
            }
            worst = worst.max((r(x, y) + r(x0, y0) - r(x, y0) - r(x0, y)).abs());
        }
    }
    Ok(worst)
}

/// Writes `q*` density and the scalar summary.
pub fn write_solution(sol: &SchrodingerSolution, csv: impl Write, json: &std::path::Path) -> Result<()> {
    sol.q_star().write_csv(csv)?;
    io::write_json(json, sol)
}
