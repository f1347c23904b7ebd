//! Trap potentials `W: R^d -> [0, +∞]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measure::Grid;

/// A confining trap potential.
///
/// `Constant` is not confining; it exists as a reference potential for
/// normalization and shift checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrapPotential {
    /// `W = 0` on the closed box `Λ = Π [lower_a, upper_a]`, `+∞` off it.
    HardWall { lower: Vec<f64>, upper: Vec<f64> },
    /// `W(x) = offset + Σ_a coefficients_a (x_a - center_a)^2`.
    Quadratic {
        center: Vec<f64>,
        coefficients: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// Node values on a grid, multilinear in between, `+∞` off the grid.
    Tabulated {
        grid: Grid,
        #[serde(serialize_with = "ser_extended", deserialize_with = "de_extended")]
        values: Vec<f64>,
    },
    Constant { value: f64 },
}

impl TrapPotential {
    pub fn hard_wall(bounds: &[(f64, f64)]) -> Result<Self> {
        let w = Self::HardWall {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
        };
        w.validate()?;
        Ok(w)
    }

    /// Isotropic `|x|^2` in `d` dimensions; ground state energy `d` for `-Δ + W`.
    pub fn harmonic(d: usize) -> Self {
        Self::Quadratic {
            center: vec![0.0; d],
            coefficients: vec![1.0; d],
            offset: 0.0,
        }
    }

    pub fn quadratic(center: Vec<f64>, coefficients: Vec<f64>, offset: f64) -> Result<Self> {
        let w = Self::Quadratic {
            center,
            coefficients,
            offset,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn tabulated(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let w = Self::Tabulated { grid, values };
        w.validate()?;
        Ok(w)
    }

    pub fn constant(value: f64) -> Result<Self> {
        let w = Self::Constant { value };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPotential(msg));
        match self {
            Self::HardWall { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() || lower.len() > 2 {
                    return bad("hard wall box must have 1 or 2 axes".into());
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
                    return bad("hard wall box has a degenerate axis".into());
                }
            }
            Self::Quadratic {
                center,
                coefficients,
                offset,
            } => {
                if center.is_empty() || center.len() != coefficients.len() || center.len() > 2 {
                    return bad("quadratic trap needs matching center/coefficients".into());
                }
                if coefficients.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
                    return bad("quadratic coefficients must be positive for confinement".into());
                }
                if !(*offset >= 0.0) || !offset.is_finite() {
                    return bad(format!("offset must be finite and nonnegative, got {offset}"));
                }
            }
            Self::Tabulated { grid, values } => {
                if values.len() != grid.len() {
                    return bad(format!(
                        "tabulated potential needs {} values, got {}",
                        grid.len(),
                        values.len()
                    ));
                }
                if values.iter().any(|v| !(*v >= 0.0)) {
                    return bad("tabulated values must be nonnegative".into());
                }
            }
            Self::Constant { value } => {
                if !(*value >= 0.0) || !value.is_finite() {
                    return bad(format!("constant potential must be finite and >= 0, got {value}"));
                }
            }
        }
        Ok(())
    }

    /// Spatial dimension the potential is defined for, if fixed.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::HardWall { lower, .. } => Some(lower.len()),
            Self::Quadratic { center, .. } => Some(center.len()),
            Self::Tabulated { grid, .. } => Some(grid.dim()),
            Self::Constant { .. } => None,
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::InvalidPotential(format!(
                "potential is {k}-dimensional, grid is {d}-dimensional"
            ))),
            _ => Ok(()),
        }
    }

    pub fn is_confining(&self) -> bool {
        !matches!(self, Self::Constant { .. })
    }

    pub fn is_hard_wall(&self) -> bool {
        matches!(self, Self::HardWall { .. })
    }

    /// The box `Λ` of a hard-wall potential.
    pub fn hard_wall_box(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Self::HardWall { lower, upper } => Some((lower, upper)),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::HardWall { lower, upper } => {
                let inside = lower
                    .iter()
                    .zip(upper)
                    .zip(x)
                    .all(|((l, u), xi)| xi >= l && xi <= u);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Self::Quadratic {
                center,
                coefficients,
                offset,
            } => {
                offset
                    + center
                        .iter()
                        .zip(coefficients)
                        .zip(x)
                        .map(|((c, k), xi)| k * (xi - c) * (xi - c))
                        .sum::<f64>()
            }
            Self::Tabulated { grid, values } => tabulated_eval(grid, values, x),
            Self::Constant { value } => *value,
        }
    }

    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let mut node = vec![0.0; grid.dim()];
        (0..grid.len())
            .map(|i| {
                grid.node_into(i, &mut node);
                self.eval(&node)
            })
            .collect()
    }

    /// Checks that a hard-wall box falls on grid nodes.
    pub fn check_alignment(&self, grid: &Grid) -> Result<()> {
        let Some((lower, upper)) = self.hard_wall_box() else {
            return Ok(());
        };
        for axis in 0..grid.dim() {
            let h = grid.spacing(axis);
            for b in [lower[axis], upper[axis]] {
                let t = (b - grid.lower()[axis]) / h;
                if b < grid.lower()[axis] - 1e-9 * h
                    || b > grid.upper()[axis] + 1e-9 * h
                    || (t - t.round()).abs() > 1e-9
                {
                    return Err(Error::InvalidPotential(format!(
                        "hard wall at {b} is not aligned with grid nodes on axis {axis}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn tabulated_eval(grid: &Grid, values: &[f64], x: &[f64]) -> f64 {
    let mut cell = [(0usize, 0.0f64); 2];
    for axis in 0..grid.dim() {
        match grid.locate(axis, x[axis]) {
            Some(c) => cell[axis] = c,
            None => return f64::INFINITY,
        }
    }
    let n = grid.points_per_axis();
    let mut acc = 0.0;
    let corners: &[[usize; 2]] = if grid.dim() == 1 {
        &[[0, 0], [1, 0]]
    } else {
        &[[0, 0], [0, 1], [1, 0], [1, 1]]
    };
    for c in corners {
        let mut weight = 1.0;
        let mut idx = 0;
        for axis in 0..grid.dim() {
            let (i, f) = cell[axis];
            weight *= if c[axis] == 0 { 1.0 - f } else { f };
            idx = idx * n + i + c[axis];
        }
        if weight == 0.0 {
            continue;
        }
        let v = values[idx];
        if v.is_infinite() {
            return f64::INFINITY;
        }
        acc += weight * v;
    }
    acc
}

fn ser_extended<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<Option<f64>> = values
        .iter()
        .map(|x| if x.is_finite() { Some(*x) } else { None })
        .collect();
    v.serialize(s)
}

fn de_extended<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn hard_wall_is_infinite_exactly_off_box() {
        let w = TrapPotential::hard_wall(&[(0.0, PI)]).unwrap();
        assert_eq!(w.eval(&[0.0]), 0.0);
        assert_eq!(w.eval(&[PI]), 0.0);
        assert_eq!(w.eval(&[1.0]), 0.0);
        assert_eq!(w.eval(&[-1e-12]), f64::INFINITY);
        assert_eq!(w.eval(&[PI + 1e-12]), f64::INFINITY);
    }

    #[test]
    fn quadratic_grows_without_bound() {
        let w = TrapPotential::harmonic(2);
        assert_eq!(w.eval(&[0.0, 0.0]), 0.0);
        assert_eq!(w.eval(&[3.0, 4.0]), 25.0);
        assert!(w.is_confining());
        assert!(TrapPotential::quadratic(vec![0.0], vec![-1.0], 0.0).is_err());
    }

    #[test]
    fn tabulated_interpolates_and_is_infinite_outside() {
        let g = Grid::interval(0.0, 2.0, 3).unwrap();
        let w = TrapPotential::tabulated(g, vec![2.0, 0.0, f64::INFINITY]).unwrap();
        assert_eq!(w.eval(&[0.5]), 1.0);
        assert_eq!(w.eval(&[1.0]), 0.0);
        assert_eq!(w.eval(&[1.5]), f64::INFINITY);
        assert_eq!(w.eval(&[3.0]), f64::INFINITY);
    }

    #[test]
    fn tabulated_json_encodes_infinity_as_null() {
        let g = Grid::interval(0.0, 1.0, 2).unwrap();
        let w = TrapPotential::tabulated(g, vec![f64::INFINITY, 1.0]).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert!(s.contains("null"));
        let back: TrapPotential = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn wall_alignment_is_checked() {
        let g = Grid::interval(-1.0, 4.0, 51).unwrap();
        let ok = TrapPotential::hard_wall(&[(0.0, 3.0)]).unwrap();
        assert!(ok.check_alignment(&g).is_ok());
        let off = TrapPotential::hard_wall(&[(0.05, 3.0)]).unwrap();
        assert!(off.check_alignment(&g).is_err());
    }
}
