//! Grids, discrete measures on grid nodes and pair measures on node pairs.
//!
//! Weights are stored as densities with respect to the grid volume element
//! `h^d` (or `h^{2d}` for pair measures), so the mass carried by a node is
//! `weight * cell_volume`. Refining a grid therefore leaves density values
//! comparable across resolutions.

use std::io::{BufReader, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Mass tolerance used when checking that a measure is a probability.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Uniform tensor grid on a box in `R^d`, `d` in {1, 2}.
///
/// Nodes are ordered lexicographically with axis 0 most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    n: usize,
}

impl Grid {
    /// Builds a grid with `n` points per axis over the given per-axis bounds.
    pub fn new(bounds: &[(f64, f64)], n: usize) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1 or 2, got {}",
                bounds.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points per axis, got {n}"
            )));
        }
        for (axis, &(lo, hi)) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidGrid(format!(
                    "degenerate interval [{lo}, {hi}] on axis {axis}"
                )));
            }
        }
        Ok(Self {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
            n,
        })
    }

    pub fn interval(lower: f64, upper: f64, n: usize) -> Result<Self> {
        Self::new(&[(lower, upper)], n)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    /// Total node count `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.n - 1) as f64
    }

    /// Smallest spacing over all axes.
    pub fn min_spacing(&self) -> f64 {
        (0..self.dim())
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Volume element `h^d` (product of axis spacings).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Coordinate of node `i` on `axis`; the last node equals the upper bound exactly.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        if i == self.n - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (self.n - 1) as f64
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(axis, i)).collect()
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        match self.dim() {
            1 => [idx, 0],
            _ => [idx / self.n, idx % self.n],
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(idx, &mut out);
        out
    }

    pub fn node_into(&self, idx: usize, out: &mut [f64]) {
        let mi = self.multi_index(idx);
        for (axis, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.coord(axis, mi[axis]);
        }
    }

    /// All node coordinates, flattened with stride `d`.
    pub fn nodes_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.len() * d];
        for idx in 0..self.len() {
            self.node_into(idx, &mut out[idx * d..(idx + 1) * d]);
        }
        out
    }

    /// True when the node lies on the outer boundary of the grid box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        let mi = self.multi_index(idx);
        mi[..self.dim()].iter().any(|&i| i == 0 || i == self.n - 1)
    }

    /// Index of the node nearest to `point`, clamped to the grid.
    pub fn nearest_node(&self, point: &[f64]) -> usize {
        let mut multi = [0usize; 2];
        for axis in 0..self.dim() {
            let t = (point[axis] - self.lower[axis]) / self.spacing(axis);
            let i = if t.is_nan() { 0.0 } else { t.round() };
            multi[axis] = i.clamp(0.0, (self.n - 1) as f64) as usize;
        }
        self.flat_index(&multi[..self.dim()])
    }

    /// Locates `x` on an axis for linear interpolation: returns the left node
    /// and the fractional offset, or `None` outside the axis range.
    pub fn locate(&self, axis: usize, x: f64) -> Option<(usize, f64)> {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        if !(x >= lo && x <= hi) {
            return None;
        }
        let t = (x - lo) / self.spacing(axis);
        let i = (t.floor() as usize).min(self.n - 2);
        Some((i, t - i as f64))
    }

    /// Multilinear interpolation of nodal values; zero outside the grid box.
    pub fn interpolate(&self, values: &[f64], point: &[f64]) -> f64 {
        match self.dim() {
            1 => match self.locate(0, point[0]) {
                Some((i, f)) => values[i] * (1.0 - f) + values[i + 1] * f,
                None => 0.0,
            },
            _ => {
                let (Some((i, fx)), Some((j, fy))) =
                    (self.locate(0, point[0]), self.locate(1, point[1]))
                else {
                    return 0.0;
                };
                let n = self.n;
                let v00 = values[i * n + j];
                let v01 = values[i * n + j + 1];
                let v10 = values[(i + 1) * n + j];
                let v11 = values[(i + 1) * n + j + 1];
                (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)
            }
        }
    }

    /// Grid over the same box with `factor` times finer spacing; every node of
    /// `self` is a node of the result.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            n: (self.n - 1) * factor.max(1) + 1,
        }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        (0..self.dim()).all(|a| point[a] >= self.lower[a] && point[a] <= self.upper[a])
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{what}: grids differ")));
        }
        Ok(())
    }

    pub(crate) fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("dim".into(), self.dim().to_string()),
            ("lower".into(), io::join_floats(&self.lower)),
            ("upper".into(), io::join_floats(&self.upper)),
            ("n".into(), self.n.to_string()),
        ]
    }

    pub(crate) fn from_metadata(meta: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("missing metadata '{key}'")))
        };
        let lower = io::parse_floats(get("lower")?)?;
        let upper = io::parse_floats(get("upper")?)?;
        let n: usize = get("n")?
            .parse()
            .map_err(|_| Error::InvalidArgument("metadata 'n' is not an integer".into()))?;
        if lower.len() != upper.len() {
            return Err(Error::InvalidGrid("lower/upper length mismatch".into()));
        }
        let bounds: Vec<_> = lower.into_iter().zip(upper).collect();
        Grid::new(&bounds, n)
    }
}

/// Nonnegative measure on grid nodes, stored as densities w.r.t. `h^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    grid: Grid,
    weights: Vec<f64>,
    is_probability: bool,
}

impl DiscreteMeasure {
    pub fn new(grid: Grid, weights: Vec<f64>, is_probability: bool) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                grid.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and nonnegative, found {w}"
            )));
        }
        let m = Self {
            grid,
            weights,
            is_probability,
        };
        if is_probability {
            let total = m.total_mass();
            if (total - 1.0).abs() > PROBABILITY_TOL * 100.0 {
                return Err(Error::InvalidArgument(format!(
                    "probability measure has total mass {total}"
                )));
            }
        }
        Ok(m)
    }

    /// Probability measure from node masses (normalized to total mass 1).
    pub fn from_masses(grid: Grid, masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Estimation(format!(
                "cannot normalize masses with total {total}"
            )));
        }
        let vol = grid.cell_volume();
        let weights = masses.iter().map(|m| m / (total * vol)).collect();
        Self::new(grid, weights, true)
    }

    /// Probability measure with density proportional to `density`.
    pub fn from_density(grid: Grid, density: &[f64]) -> Result<Self> {
        let vol = grid.cell_volume();
        let masses: Vec<f64> = density.iter().map(|w| w * vol).collect();
        Self::from_masses(grid, &masses)
    }

    /// Grid Lebesgue measure: density 1 at every node.
    pub fn lebesgue(grid: Grid) -> Self {
        let weights = vec![1.0; grid.len()];
        Self {
            grid,
            weights,
            is_probability: false,
        }
    }

    /// Grid Lebesgue measure restricted to the nodes where `keep` holds.
    pub fn lebesgue_where(grid: Grid, keep: impl Fn(&[f64]) -> bool) -> Self {
        let weights = (0..grid.len())
            .map(|i| if keep(&grid.node(i)) { 1.0 } else { 0.0 })
            .collect();
        Self {
            grid,
            weights,
            is_probability: false,
        }
    }

    pub fn point_mass(grid: Grid, idx: usize) -> Result<Self> {
        let mut masses = vec![0.0; grid.len()];
        *masses
            .get_mut(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("node {idx} out of range")))? = 1.0;
        Self::from_masses(grid, &masses)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Densities with respect to `h^d`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_probability(&self) -> bool {
        self.is_probability
    }

    /// Node masses `weight * h^d`.
    pub fn masses(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        self.weights.iter().map(|w| w * vol).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn normalized(&self) -> Result<Self> {
        Self::from_masses(self.grid.clone(), &self.masses())
    }

    /// Writes the measure as CSV: `#` metadata, a header row, then one row per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut meta = self.grid.metadata();
        meta.push(("is_probability".into(), self.is_probability.to_string()));
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|a| format!("x{a}")).collect();
        header.push("weight".into());
        let mut w = io::csv_writer(out, &meta)?;
        w.write_record(&header)?;
        let mut node = vec![0.0; d];
        for (idx, weight) in self.weights.iter().enumerate() {
            self.grid.node_into(idx, &mut node);
            let mut rec: Vec<String> = node.iter().map(|x| io::fmt_f64(*x)).collect();
            rec.push(io::fmt_f64(*weight));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let meta = io::read_metadata(&mut reader)?;
        let grid = Grid::from_metadata(&meta)?;
        let is_probability = meta
            .iter()
            .any(|(k, v)| k == "is_probability" && v == "true");
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let d = grid.dim();
        let mut weights = Vec::with_capacity(grid.len());
        for rec in rdr.records() {
            let rec = rec?;
            let field = rec
                .get(d)
                .ok_or_else(|| Error::InvalidArgument("missing weight column".into()))?;
            weights.push(io::parse_f64(field)?);
        }
        Self::new(grid, weights, is_probability)
    }
}

/// Nonnegative measure on node pairs, densities w.r.t. `h^{2d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMeasure {
    grid: Grid,
    weights: Array2<f64>,
}

impl PairMeasure {
    pub fn new(grid: Grid, weights: Array2<f64>) -> Result<Self> {
        let n = grid.len();
        if weights.dim() != (n, n) {
            return Err(Error::InvalidArgument(format!(
                "pair weights must be {n}x{n}, got {:?}",
                weights.dim()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "pair weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { grid, weights })
    }

    /// Pair measure from node-pair masses (no normalization applied).
    pub fn from_masses(grid: Grid, masses: Array2<f64>) -> Result<Self> {
        let vol2 = grid.cell_volume().powi(2);
        Self::new(grid, masses / vol2)
    }

    /// Product measure `a ⊗ b`.
    pub fn product(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<Self> {
        a.grid.ensure_same(&b.grid, "product measure")?;
        let n = a.grid.len();
        let w = Array2::from_shape_fn((n, n), |(i, j)| a.weights[i] * b.weights[j]);
        Self::new(a.grid.clone(), w)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn masses(&self) -> Array2<f64> {
        &self.weights * self.grid.cell_volume().powi(2)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.sum() * self.grid.cell_volume().powi(2)
    }

    pub fn normalized(&self) -> Result<Self> {
        let total = self.total_mass();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Estimation(format!(
                "cannot normalize pair measure with total mass {total}"
            )));
        }
        Self::new(self.grid.clone(), &self.weights / total)
    }

    pub fn transpose(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            weights: self.weights.t().to_owned(),
        }
    }

    /// Largest entry-wise asymmetry `|q(x,y) - q(y,x)|` in mass units.
    pub fn asymmetry(&self) -> f64 {
        let vol2 = self.grid.cell_volume().powi(2);
        let w = &self.weights;
        let n = self.grid.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((w[[i, j]] - w[[j, i]]).abs() * vol2);
            }
        }
        worst
    }

    /// Total-variation distance between two pair measures (mass units).
    pub fn tv_distance(&self, other: &PairMeasure) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "pair tv distance")?;
        let vol2 = self.grid.cell_volume().powi(2);
        let s: f64 = self
            .weights
            .iter()
            .zip(other.weights.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(0.5 * s * vol2)
    }

    /// Writes the density matrix as CSV with `#` grid metadata.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut meta = self.grid.metadata();
        meta.push(("units".into(), "density per h^(2d)".into()));
        io::write_matrix_csv(out, &meta, &self.weights)
    }
}

/// `H(q | r) = Σ q log(q / r)` over node pairs, with `0 log 0 = 0`.
///
/// Both measures must be probabilities on the same grid. Returns `+∞` when
/// `q` charges a pair where `r` vanishes.
pub fn relative_entropy(q: &PairMeasure, r: &PairMeasure) -> Result<f64> {
    q.grid.ensure_same(&r.grid, "relative entropy")?;
    for (name, m) in [("q", q), ("r", r)] {
        let total = m.total_mass();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "relative entropy needs probabilities, {name} has mass {total}"
            )));
        }
    }
    let vol2 = q.grid.cell_volume().powi(2);
    Ok(kl_sum(
        q.weights.iter().map(|w| w * vol2),
        r.weights.iter().map(|w| w * vol2),
    ))
}

/// `Σ a log(a / b)` for nonnegative sequences; `b` need not be normalized.
pub(crate) fn kl_sum(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.zip(b) {
        if x == 0.0 {
            continue;
        }
        if y <= 0.0 {
            return f64::INFINITY;
        }
        acc += x * (x / y).ln();
    }
    acc
}

/// Row- and column-sum marginals of a pair measure.
pub fn marginals(q: &PairMeasure) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let vol = q.grid.cell_volume();
    let is_prob = (q.total_mass() - 1.0).abs() <= 1e-9;
    let rows: Vec<f64> = q.weights.rows().into_iter().map(|r| r.sum() * vol).collect();
    let cols: Vec<f64> = q
        .weights
        .columns()
        .into_iter()
        .map(|c| c.sum() * vol)
        .collect();
    let build = |w: Vec<f64>| {
        if is_prob {
            // Renormalize away the 1e-9 slack so the probability invariant holds tightly.
            DiscreteMeasure::from_density(q.grid.clone(), &w)
        } else {
            DiscreteMeasure::new(q.grid.clone(), w, false)
        }
    };
    Ok((build(rows)?, build(cols)?))
}

/// Distances between two probability measures on the same grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureDistance {
    pub total_variation: f64,
    /// Wasserstein-1 via the CDF difference; only defined for `d = 1`.
    pub wasserstein1: Option<f64>,
}

pub fn measure_distance(p: &DiscreteMeasure, r: &DiscreteMeasure) -> Result<MeasureDistance> {
    p.grid.ensure_same(&r.grid, "measure distance")?;
    let (pm, rm) = (p.masses(), r.masses());
    let tv = 0.5 * pm.iter().zip(&rm).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let w1 = (p.grid.dim() == 1).then(|| {
        let h = p.grid.spacing(0);
        let mut cdf_gap = 0.0;
        let mut total = 0.0;
        for (a, b) in pm.iter().zip(&rm).take(pm.len() - 1) {
            cdf_gap += a - b;
            total += cdf_gap.abs() * h;
        }
        total
    });
    Ok(MeasureDistance {
        total_variation: tv,
        wasserstein1: w1,
    })
}
