//! The symmetrized N-bridge ensemble: uniform permutation, i.i.d. starts,
//! bridges `x_i -> x_σ(i)` weighted by `exp(-Σ_i ∫ W)`, plus the exact
//! cycle-expansion of the symmetrized trace.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{gauss_density, sample_bridge, PathSample};
use crate::error::{Error, Result};
use crate::kernel::FKKernel;
use crate::measure::{DiscreteMeasure, Grid};
use crate::potential::TrapPotential;
use crate::sampling::{McEstimate, Moments, SeedPlan};
use crate::transport::PairWeight;

/// A permutation of `0..N` with its cycle lengths (descending).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub sigma: Vec<usize>,
    pub cycle_type: Vec<usize>,
}

pub fn cycle_type(sigma: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; sigma.len()];
    let mut lengths = Vec::new();
    for start in 0..sigma.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = sigma[i];
            len += 1;
        }
        lengths.push(len);
    }
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    lengths
}

/// Uniform random permutation by Fisher–Yates.
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Permutation> {
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    let mut sigma: Vec<usize> = (0..n).collect();
    sigma.shuffle(rng);
    let cycle_type = cycle_type(&sigma);
    Ok(Permutation { sigma, cycle_type })
}

/// Parameters of `P^sym_{m,N,W}` with an optional pair reweighting `g`.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub m: DiscreteMeasure,
    pub n_particles: usize,
    pub beta: f64,
    pub steps: usize,
    pub potential: TrapPotential,
    pub pair_weight: PairWeight,
}

impl EnsembleSpec {
    pub fn new(
        m: DiscreteMeasure,
        n_particles: usize,
        beta: f64,
        steps: usize,
        potential: TrapPotential,
    ) -> Result<Self> {
        if !m.is_probability() {
            return Err(Error::InvalidArgument("start measure m must be a probability".into()));
        }
        if n_particles < 1 || steps < 1 || !(beta > 0.0) {
            return Err(Error::InvalidArgument(
                "need N >= 1, at least one step and beta > 0".into(),
            ));
        }
        potential.check_dim(m.grid().dim())?;
        Ok(Self {
            m,
            n_particles,
            beta,
            steps,
            potential,
            pair_weight: PairWeight::Unit,
        })
    }

    pub fn with_pair_weight(mut self, g: PairWeight) -> Result<Self> {
        if let PairWeight::Custom(v) = &g {
            let n = self.m.grid().len();
            if v.dim() != (n, n) || v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::NonPositive("pair weight must be positive on node pairs".into()));
            }
        }
        self.pair_weight = g;
        Ok(self)
    }

    fn log_g(&self, grid: &Grid, i: usize, j: usize) -> f64 {
        match &self.pair_weight {
            PairWeight::Unit => 0.0,
            PairWeight::FreeKernel => gauss_density(&grid.node(i), &grid.node(j), self.beta).ln(),
            PairWeight::Custom(v) => v[[i, j]].ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSample {
    pub permutation: Permutation,
    /// Grid node of each start point.
    pub start_nodes: Vec<usize>,
    /// Path `i` runs from `start_nodes[i]` to `start_nodes[σ(i)]`.
    pub paths: Vec<PathSample>,
    /// `Σ_i log feynman_kac_weight(path i)`, `≤ 0`.
    pub log_weight: f64,
    /// `Σ_i log g(x_i, x_σ(i))`; zero for `g ≡ 1`.
    pub log_pair_weight: f64,
}

impl EnsembleSample {
    /// Log of the full importance weight.
    pub fn log_total_weight(&self) -> f64 {
        self.log_weight + self.log_pair_weight
    }
}

pub fn sample_sym_ensemble<R: Rng + ?Sized>(spec: &EnsembleSpec, rng: &mut R) -> Result<EnsembleSample> {
    let grid = spec.m.grid();
    let starts_dist = WeightedIndex::new(spec.m.weights())
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from m: {e}")))?;
    sample_with(spec, &starts_dist, grid, rng)
}

fn sample_with<R: Rng + ?Sized>(
    spec: &EnsembleSpec,
    starts_dist: &WeightedIndex<f64>,
    grid: &Grid,
    rng: &mut R,
) -> Result<EnsembleSample> {
    let n = spec.n_particles;
    let permutation = sample_permutation(n, rng)?;
    let start_nodes: Vec<usize> = (0..n).map(|_| starts_dist.sample(rng)).collect();
    let points: Vec<Vec<f64>> = start_nodes.iter().map(|&i| grid.node(i)).collect();
    let mut paths = Vec::with_capacity(n);
    let mut log_weight = 0.0;
    let mut log_pair_weight = 0.0;
    for i in 0..n {
        let j = permutation.sigma[i];
        let mut path = sample_bridge(&points[i], &points[j], spec.beta, spec.steps, rng)?;
        path.attach_weight(&spec.potential);
        log_weight += path.log_weight;
        log_pair_weight += spec.log_g(grid, start_nodes[i], start_nodes[j]);
        paths.push(path);
    }
    Ok(EnsembleSample {
        permutation,
        start_nodes,
        paths,
        log_weight,
        log_pair_weight,
    })
}

/// Weighted histograms and weight moments; merging is associative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnsembleAccumulator {
    pub weights: Moments,
    pub weight_sq_sum: f64,
    /// One histogram (node masses, unnormalized) per time mark.
    pub l_hist: Vec<Vec<f64>>,
    pub y_hist: Vec<f64>,
}

impl EnsembleAccumulator {
    pub fn new(grid: &Grid, marks: usize) -> Self {
        Self {
            weights: Moments::default(),
            weight_sq_sum: 0.0,
            l_hist: vec![vec![0.0; grid.len()]; marks],
            y_hist: vec![0.0; grid.len()],
        }
    }

    /// Adds one sample; `time_marks` are times in `[0, β]`.
    pub fn push(&mut self, sample: &EnsembleSample, grid: &Grid, time_marks: &[f64]) {
        let w = sample.log_total_weight().exp();
        self.weights.push(w);
        self.weight_sq_sum += w * w;
        if w == 0.0 {
            return;
        }
        let n = sample.paths.len() as f64;
        for path in &sample.paths {
            for (hist, &t) in self.l_hist.iter_mut().zip(time_marks) {
                let node = grid.nearest_node(path.position(path.time_index(t)));
                hist[node] += w / n;
            }
            let times = path.times();
            let beta = path.horizon();
            for k in 0..times.len() {
                let left = if k > 0 { times[k] - times[k - 1] } else { 0.0 };
                let right = if k + 1 < times.len() { times[k + 1] - times[k] } else { 0.0 };
                let dt = 0.5 * (left + right);
                let node = grid.nearest_node(path.position(k));
                self.y_hist[node] += w * dt / (beta * n);
            }
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.weights = self.weights.merge(other.weights);
        self.weight_sq_sum += other.weight_sq_sum;
        for (a, b) in self.l_hist.iter_mut().zip(other.l_hist) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.y_hist.iter_mut().zip(other.y_hist).for_each(|(x, y)| *x += y);
        self
    }

    pub fn finish(self, grid: &Grid, time_marks: &[f64], seed: Option<u64>) -> Result<EnsembleEstimates> {
        let total = self.weights.sum;
        if !(total > 0.0) {
            return Err(Error::Estimation(format!(
                "all {} importance weights are zero",
                self.weights.count
            )));
        }
        let l_marginals = self
            .l_hist
            .iter()
            .map(|h| DiscreteMeasure::from_masses(grid.clone(), h))
            .collect::<Result<Vec<_>>>()?;
        let y_hat = DiscreteMeasure::from_masses(grid.clone(), &self.y_hist)?;
        Ok(EnsembleEstimates {
            z_hat: self.weights.estimate(),
            effective_sample_size: total * total / self.weight_sq_sum,
            time_marks: time_marks.to_vec(),
            l_marginals,
            y_hat,
            n_samples: self.weights.count,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimates {
    /// Mean importance weight: `Z^sym` when `g ≡ 1`.
    pub z_hat: McEstimate,
    pub effective_sample_size: f64,
    pub time_marks: Vec<f64>,
    pub l_marginals: Vec<DiscreteMeasure>,
    pub y_hat: DiscreteMeasure,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

/// Self-normalized estimates from stored samples. Histograms live on `grid`
/// (nearest node).
pub fn ensemble_estimates(
    samples: &[EnsembleSample],
    grid: &Grid,
    time_marks: &[f64],
) -> Result<EnsembleEstimates> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one ensemble sample".into()));
    }
    let shape = (samples[0].paths.len(), samples[0].paths[0].steps(), samples[0].paths[0].horizon());
    if samples
        .iter()
        .any(|s| (s.paths.len(), s.paths[0].steps(), s.paths[0].horizon()) != shape)
    {
        return Err(Error::InvalidArgument("samples differ in (N, M, beta)".into()));
    }
    let mut acc = EnsembleAccumulator::new(grid, time_marks.len());
    for s in samples {
        acc.push(s, grid, time_marks);
    }
    acc.finish(grid, time_marks, None)
}

/// Samples `n_samples` ensembles in parallel chunks and accumulates the
/// estimates without storing paths.
pub fn run_ensemble(
    spec: &EnsembleSpec,
    n_samples: usize,
    plan: SeedPlan,
    hist_grid: &Grid,
    time_marks: &[f64],
) -> Result<EnsembleEstimates> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let grid = spec.m.grid();
    let dist = WeightedIndex::new(spec.m.weights())
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from m: {e}")))?;
    let parts = plan.map_chunks(n_samples, |rng, range| -> Result<EnsembleAccumulator> {
        let mut acc = EnsembleAccumulator::new(hist_grid, time_marks.len());
        for _ in range {
            let s = sample_with(spec, &dist, grid, rng)?;
            acc.push(&s, hist_grid, time_marks);
        }
        Ok(acc)
    });
    let mut total = EnsembleAccumulator::new(hist_grid, time_marks.len());
    for p in parts {
        total = total.merge(p?);
    }
    total.finish(hist_grid, time_marks, Some(plan.seed))
}

/// `log h_0, ..., log h_N` for `h_N = (1/N) Σ_ℓ Tr(A^ℓ) h_{N-ℓ}`, `A = K h^d`.
pub fn log_sym_traces(k: &FKKernel, n_max: usize) -> Result<Vec<f64>> {
    if n_max < 1 {
        return Err(Error::InvalidArgument("need N >= 1".into()));
    }
    let a = k.scaled();
    let log_tr = log_power_traces(&a, n_max)?;
    let mut log_h = vec![0.0];
    for n in 1..=n_max {
        let terms: Vec<f64> = (1..=n).map(|l| log_tr[l - 1] + log_h[n - l]).collect();
        log_h.push(log_sum_exp(&terms) - (n as f64).ln());
    }
    Ok(log_h)
}

/// `log Tr(A^ℓ)` for `ℓ = 1..=n`, with powers rescaled to stay in range.
fn log_power_traces(a: &Array2<f64>, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut p = a.clone();
    let mut log_scale = 0.0;
    for l in 1..=n {
        if l > 1 {
            p = p.dot(a);
        }
        let s = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(s > 0.0) {
            return Err(Error::NonPositive(format!("A^{l} vanishes")));
        }
        p /= s;
        log_scale += s.ln();
        let tr: f64 = p.diag().sum();
        if !(tr > 0.0) {
            return Err(Error::NonPositive(format!("Tr(A^{l}) is not positive")));
        }
        out.push(tr.ln() + log_scale);
    }
    Ok(out)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `h_N`, the symmetrized trace of `N` bridges with Lebesgue starts.
pub fn sym_trace_exact(k: &FKKernel, n: usize) -> Result<f64> {
    Ok(log_sym_traces(k, n)?[n].exp())
}

/// `-(1/N) log h_N` for `N = 1..=n_max`.
pub fn free_energy_curve(k: &FKKernel, n_max: usize) -> Result<Vec<f64>> {
    let log_h = log_sym_traces(k, n_max)?;
    Ok((1..=n_max).map(|n| -log_h[n] / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cycle_types() {
        assert_eq!(cycle_type(&[0]), vec![1]);
        assert_eq!(cycle_type(&[1, 2, 0, 3]), vec![3, 1]);
        assert_eq!(cycle_type(&[1, 0, 3, 2]), vec![2, 2]);
    }

    #[test]
    fn single_particle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_permutation(1, &mut rng).unwrap();
        assert_eq!(p.sigma, vec![0]);
        assert_eq!(p.cycle_type, vec![1]);
        assert!(sample_permutation(0, &mut rng).is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_fail_explicitly() {
        let g = Grid::interval(0.0, 1.0, 3).unwrap();
        let acc = EnsembleAccumulator::new(&g, 1);
        assert!(matches!(acc.finish(&g, &[0.5], None), Err(Error::Estimation(_))));
    }
}
