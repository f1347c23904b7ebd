//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use symbridge::{Grid, TrapPotential};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Spectral,
    Transport,
    Ensemble,
    Diffusion,
    DvCheck,
    Trace,
    FullSuite,
}

/// Tolerances with their documented defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Absolute error of the principal eigenvalue.
    pub eigenvalue: f64,
    /// Sup-norm error of the ground state against its closed form.
    pub phi_sup: f64,
    /// Relative error of `-log λ_T` against `β λ`.
    pub trace_rel: f64,
    /// Relative error of the last free-energy value against `β λ`.
    pub free_energy_rel: f64,
    /// Relative error of the cycle recursion against permutation sums.
    pub recursion_rel: f64,
    /// Relative entry-wise error of the hard-wall Sinkhorn coupling.
    pub hard_wall_entry_rel: f64,
    /// TV between Sinkhorn and eigen-based couplings.
    pub coupling_tv: f64,
    pub factorization: f64,
    /// Objective at `q*` against `-log λ_T`.
    pub objective: f64,
    /// Allowed distance of Monte Carlo means in standard errors.
    pub z_score: f64,
    /// L1 distance of occupation histograms to `φ²`.
    pub occupation_l1: f64,
    pub duality_gap: f64,
    /// TV between ensemble and sampler marginals.
    pub ensemble_tv: f64,
    /// Sup-norm marginal error at which Sinkhorn stops.
    pub sinkhorn: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eigenvalue: 1e-3,
            phi_sup: 1e-3,
            trace_rel: 0.02,
            free_energy_rel: 0.05,
            recursion_rel: 1e-10,
            hard_wall_entry_rel: 0.02,
            coupling_tv: 1e-6,
            factorization: 1e-6,
            objective: 1e-6,
            z_score: 3.0,
            occupation_l1: 0.05,
            duality_gap: 1e-4,
            ensemble_tv: 0.08,
            sinkhorn: 1e-10,
        }
    }
}

fn default_n() -> usize {
    201
}
fn default_beta() -> f64 {
    1.0
}
fn default_particles() -> usize {
    8
}
fn default_steps() -> usize {
    32
}
fn default_samples() -> usize {
    10_000
}
fn default_mc_samples() -> usize {
    100_000
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_total() -> f64 {
    1e4
}
fn default_probes() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Required by every experiment except `full-suite`.
    #[serde(default)]
    pub trap: Option<TrapPotential>,
    /// `[lower, upper]` per axis; defaults to the hard-wall box.
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
    /// Grid points per axis.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Particle number `N` (largest `N` for `trace`).
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Time steps `M` per bridge.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Ensemble samples and sampler paths.
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Paths per starting point in the martingale check.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_total")]
    pub t_total: f64,
    /// Random probe couplings in the optimality check.
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub tol: Tolerances,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("seed required")]
    MissingSeed,
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed.is_none() {
            return Err(ConfigError::MissingSeed);
        }
        let positive = [
            ("beta", self.beta),
            ("dt", self.dt),
            ("t_total", self.t_total),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("particles", self.particles),
            ("steps", self.steps),
            ("n_samples", self.n_samples),
            ("mc_samples", self.mc_samples),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if let Some(w) = &self.trap {
            w.validate().map_err(|e| invalid("trap", e.to_string()))?;
        }
        if self.experiment != Experiment::FullSuite {
            if self.trap.is_none() {
                return Err(invalid("trap", "required for this experiment"));
            }
            self.grid()?;
        }
        Ok(())
    }

    /// Domain bounds: explicit, else the hard-wall box.
    pub fn bounds(&self) -> Result<Vec<(f64, f64)>, ConfigError> {
        if let Some(d) = &self.domain {
            return Ok(d.iter().map(|b| (b[0], b[1])).collect());
        }
        match self.trap.as_ref().and_then(|w| w.hard_wall_box()) {
            Some((lo, hi)) => Ok(lo.iter().copied().zip(hi.iter().copied()).collect()),
            None => Err(invalid("domain", "required for traps without a hard wall")),
        }
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let bounds = self.bounds()?;
        let grid = Grid::new(&bounds, self.n).map_err(|e| invalid("n", e.to_string()))?;
        if let Some(w) = &self.trap {
            w.check_dim(grid.dim()).map_err(|e| invalid("domain", e.to_string()))?;
        }
        Ok(grid)
    }

    pub fn trap(&self) -> &TrapPotential {
        self.trap.as_ref().expect("validated config has a trap")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPECTRAL: &str = r#"{
        "experiment": "spectral",
        "trap": {"kind": "hard_wall", "lower": [0.0], "upper": [3.141592653589793]},
        "n": 201, "beta": 1.0, "seed": 7
    }"#;

    #[test]
    fn minimal_spectral_config_is_valid() {
        let cfg = parse_config(SPECTRAL).unwrap();
        assert_eq!(cfg.experiment, Experiment::Spectral);
        assert_eq!(cfg.grid().unwrap().len(), 201);
        assert_eq!(cfg.tol, Tolerances::default());
    }

    #[test]
    fn seed_is_mandatory() {
        let text = SPECTRAL.replace(", \"seed\": 7", "");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.to_string(), "seed required");
    }

    #[test]
    fn single_node_grid_is_rejected_with_field() {
        let text = SPECTRAL.replace("\"n\": 201", "\"n\": 1");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.starts_with("n: invalid grid"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = SPECTRAL.replace("\"seed\": 7", "\"seed\": 7, \"colour\": 1");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let text = SPECTRAL.replace("\"seed\": 7", "\"seed\": 7, \"tol\": {\"eigen\": 1}");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("eigen") && err.starts_with("tol"), "{err}");
    }

    #[test]
    fn malformed_numbers_report_their_path() {
        let text = SPECTRAL.replace("\"beta\": 1.0", "\"beta\": \"one\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.starts_with("beta:"), "{err}");
        let text = SPECTRAL.replace("\"beta\": 1.0", "\"beta\": -1.0");
        assert!(parse_config(&text).unwrap_err().to_string().starts_with("beta:"));
    }

    #[test]
    fn soft_traps_need_a_domain() {
        let text = r#"{"experiment": "spectral", "trap": {"kind": "quadratic", "center": [0.0], "coefficients": [1.0]}, "seed": 1}"#;
        assert!(parse_config(text).unwrap_err().to_string().starts_with("domain"));
    }
}
