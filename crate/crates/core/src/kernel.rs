//! Grid transfer-matrix approximation of the bridge kernel
//! `K(x,y) = p_β(x,y) E^β_{x,y}[exp(-∫ W)]`.
//!
//! One step is the Strang product `A = D G D` with `D = diag(exp(-δW/2))`
//! and `G` the Gaussian convolution of variance `2δ` (times the volume
//! element). `K = A^steps / h^d`, formed by repeated squaring.
//!
//! Hard walls need more than masking nodes with `W = ∞`: a step that starts
//! near the wall can cross it and come back between two grid times, which
//! masking cannot see. The one-step Gaussian is therefore replaced by the
//! killed (method of images) kernel of the box, which is exact for the
//! Brownian motion absorbed at the walls.

use std::io::Write;

use ndarray::{Array2, Zip};

use crate::bridge::gauss_density;
use crate::error::{Error, Result};
use crate::io;
use crate::measure::Grid;
use crate::potential::TrapPotential;

/// Upper bound on the number of fine-grid nodes used for refinement.
const MAX_FINE_NODES_1D: usize = 2001;
const MAX_FINE_NODES_2D: usize = 961;

#[derive(Clone, Debug, PartialEq)]
pub struct FKKernel {
    pub grid: Grid,
    pub beta: f64,
    pub steps: usize,
    /// Spatial refinement factor of the grid the product was formed on.
    pub refine: usize,
    /// `K(x, y)`, a density in `y`.
    pub matrix: Array2<f64>,
    /// Set when the per-step diffusion length `sqrt(2δ)` is below the spacing.
    pub coarse_warning: bool,
}

impl FKKernel {
    /// `K · h^d`, the matrix whose powers compose the kernel on the grid.
    pub fn scaled(&self) -> Array2<f64> {
        &self.matrix * self.grid.cell_volume()
    }

    /// Entry-wise `K / p_β`: the normalized bridge expectation `E^β_{x,y}[e^{-W̃}]`.
    pub fn free_ratio(&self) -> Array2<f64> {
        let nodes = self.grid.nodes_flat();
        let d = self.grid.dim();
        let mut out = self.matrix.clone();
        for ((i, j), v) in out.indexed_iter_mut() {
            if *v == 0.0 {
                continue;
            }
            let p = gauss_density(&nodes[i * d..(i + 1) * d], &nodes[j * d..(j + 1) * d], self.beta);
            *v = if p > 0.0 { *v / p } else { 0.0 };
        }
        out
    }

    /// Kernel for `W + c`: every entry multiplied by `exp(-cβ)`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut k = self.clone();
        k.matrix.mapv_inplace(|v| v * (-c * self.beta).exp());
        k
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut meta = self.grid.metadata();
        meta.push(("beta".into(), io::fmt_f64(self.beta)));
        meta.push(("steps".into(), self.steps.to_string()));
        meta.push(("refine".into(), self.refine.to_string()));
        meta.push(("coarse_warning".into(), self.coarse_warning.to_string()));
        io::write_matrix_csv(out, &meta, &self.matrix)
    }
}

/// `max(100, ⌈β/h²⌉)`, capped at `10^4`.
pub fn default_steps(beta: f64, grid: &Grid) -> usize {
    let h = grid.min_spacing();
    ((beta / (h * h)).ceil() as usize).clamp(100, 10_000)
}

/// Transfer-matrix kernel for `W` at time `β`. `steps = None` uses [`default_steps`].
pub fn fk_kernel_grid(
    w: &TrapPotential,
    beta: f64,
    grid: &Grid,
    steps: Option<usize>,
) -> Result<FKKernel> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let steps = steps.unwrap_or_else(|| default_steps(beta, grid));
    if steps < 1 {
        return Err(Error::InvalidArgument("need at least one time step".into()));
    }
    w.check_dim(grid.dim())?;
    w.check_alignment(grid)?;
    let delta = beta / steps as f64;
    let mix = (2.0 * delta).sqrt();

    let cap = if grid.dim() == 1 {
        MAX_FINE_NODES_1D
    } else {
        MAX_FINE_NODES_2D
    };
    let mut refine = (grid.min_spacing() / mix).ceil().max(1.0) as usize;
    while refine > 1 && grid.refine(refine).len() > cap {
        refine -= 1;
    }
    let fine = grid.refine(refine);
    let coarse_warning = mix < fine.min_spacing();

    let step = one_step_matrix(w, &fine, delta);
    let power = symmetric_power(&step, steps);

    let n = grid.len();
    let vol_f = fine.cell_volume();
    let fine_index = |idx: usize| {
        let mi = grid.multi_index(idx);
        let scaled: Vec<usize> = mi[..grid.dim()].iter().map(|i| i * refine).collect();
        fine.flat_index(&scaled)
    };
    let map: Vec<usize> = (0..n).map(fine_index).collect();
    let matrix = Array2::from_shape_fn((n, n), |(i, j)| power[[map[i], map[j]]] / vol_f);

    Ok(FKKernel {
        grid: grid.clone(),
        beta,
        steps,
        refine,
        matrix,
        coarse_warning,
    })
}

/// `D G D` on `grid` for one step of length `delta`.
fn one_step_matrix(w: &TrapPotential, grid: &Grid, delta: f64) -> Array2<f64> {
    let d = grid.dim();
    let n_axis = grid.points_per_axis();
    let vol = grid.cell_volume();
    let half: Vec<f64> = w
        .on_grid(grid)
        .iter()
        .map(|v| (-0.5 * delta * v).exp())
        .collect();

    // 1D factors per axis, indexed by node indices on that axis.
    let factors: Vec<Array2<f64>> = (0..d)
        .map(|axis| {
            let xs = grid.axis_coords(axis);
            let walls = w.hard_wall_box().map(|(lo, hi)| (lo[axis], hi[axis]));
            Array2::from_shape_fn((n_axis, n_axis), |(i, j)| match walls {
                Some((a, b)) => killed_gauss_1d(xs[i], xs[j], a, b, delta),
                None => gauss_1d(xs[i] - xs[j], delta),
            })
        })
        .collect();

    let n = grid.len();
    let mut a = Array2::zeros((n, n));
    Zip::indexed(&mut a).for_each(|(i, j), v| {
        if half[i] == 0.0 || half[j] == 0.0 {
            return;
        }
        let (mi, mj) = (grid.multi_index(i), grid.multi_index(j));
        let g: f64 = (0..d).map(|ax| factors[ax][[mi[ax], mj[ax]]]).product();
        *v = half[i] * g * vol * half[j];
    });
    a
}

fn gauss_1d(r: f64, delta: f64) -> f64 {
    (4.0 * std::f64::consts::PI * delta).powf(-0.5) * (-r * r / (4.0 * delta)).exp()
}

/// Transition density of the motion absorbed at `a` and `b`, by images.
fn killed_gauss_1d(x: f64, y: f64, a: f64, b: f64, delta: f64) -> f64 {
    if x <= a || x >= b || y <= a || y >= b {
        return 0.0;
    }
    let l = b - a;
    // Image terms beyond |k| = K contribute below exp(-(2KL)^2/(4δ)).
    let reach = ((4.0 * delta * 40.0).sqrt() / (2.0 * l)).ceil() as i64 + 1;
    let mut s = 0.0;
    for k in -reach..=reach {
        let shift = 2.0 * k as f64 * l;
        s += gauss_1d(x - y + shift, delta) - gauss_1d(x + y - 2.0 * a + shift, delta);
    }
    s.max(0.0)
}

/// `A^k` by repeated squaring, symmetrizing after every product.
fn symmetric_power(a: &Array2<f64>, mut k: usize) -> Array2<f64> {
    let mut base = a.clone();
    let mut acc: Option<Array2<f64>> = None;
    loop {
        if k & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(r) => symmetrize(r.dot(&base)),
            });
        }
        k >>= 1;
        if k == 0 {
            break;
        }
        base = symmetrize(base.dot(&base));
    }
    acc.expect("k >= 1")
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (m + t) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_default_and_cap() {
        let g = Grid::interval(0.0, std::f64::consts::PI, 201).unwrap();
        let h = g.spacing(0);
        assert_eq!(default_steps(1.0, &g), (1.0 / (h * h)).ceil() as usize);
        let coarse = Grid::interval(0.0, 1.0, 3).unwrap();
        assert_eq!(default_steps(1.0, &coarse), 100);
        let fine = Grid::interval(0.0, 1.0, 2001).unwrap();
        assert_eq!(default_steps(10.0, &fine), 10_000);
    }

    #[test]
    fn kernel_is_symmetric() {
        let g = Grid::interval(-4.0, 4.0, 41).unwrap();
        let k = fk_kernel_grid(&TrapPotential::harmonic(1), 1.0, &g, Some(64)).unwrap();
        let asym = (&k.matrix - &k.matrix.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(asym < 1e-10, "{asym}");
    }

    #[test]
    fn image_kernel_vanishes_on_the_wall() {
        assert_eq!(killed_gauss_1d(0.0, 1.0, 0.0, 3.0, 0.1), 0.0);
        assert!(killed_gauss_1d(1.0, 1.0, 0.0, 3.0, 0.1) > 0.0);
        // Far from the walls the images are negligible.
        let free = gauss_1d(0.0, 0.01);
        assert!((killed_gauss_1d(1.5, 1.5, 0.0, 3.0, 0.01) - free).abs() < 1e-12 * free);
    }

    #[test]
    fn misaligned_wall_is_rejected() {
        let g = Grid::interval(0.0, 1.0, 11).unwrap();
        let w = TrapPotential::hard_wall(&[(0.05, 1.0)]).unwrap();
        assert!(fk_kernel_grid(&w, 1.0, &g, Some(10)).is_err());
    }

    #[test]
    fn tiny_step_triggers_refinement() {
        let g = Grid::interval(-2.0, 2.0, 21).unwrap();
        let zero = TrapPotential::constant(0.0).unwrap();
        let k = fk_kernel_grid(&zero, 0.01, &g, Some(100)).unwrap();
        assert!(k.refine > 1);
        assert!(!k.coarse_warning);
    }

    #[test]
    fn csv_has_metadata() {
        let g = Grid::interval(0.0, 1.0, 4).unwrap();
        let k = fk_kernel_grid(&TrapPotential::constant(0.0).unwrap(), 0.1, &g, Some(2)).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let (meta, m) = io::read_matrix_csv(buf.as_slice()).unwrap();
        assert!(meta.iter().any(|(k, v)| k == "beta" && v == "0.1"));
        assert_eq!(m, k.matrix);
    }
}
