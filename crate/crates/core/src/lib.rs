//! Numerical laboratory for symmetrized trapped Brownian bridges.
//!
//! All diffusions use the generator `Δ`, i.e. transition variance `2t` per
//! coordinate, and the free kernel `p_β(x,y) = (4πβ)^{-d/2} e^{-|x-y|^2/4β}`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kernel;
pub mod measure;
pub mod potential;
pub mod sampling;
pub mod spectral;
pub mod transport;

pub use bridge::{
    bridge_fk_mc, feynman_kac_weight, gauss_kernel, log_fk_weight, sample_bridge,
    sample_free_path, PathSample,
};
pub use diffusion::{
    ergodic_occupation, girsanov_density, ground_state_drift, martingale_check,
    schrodinger_process_sampler, simulate_ergodic_sde, write_trajectory_csv, DriftField,
    SchrodingerPaths, SdeRun,
};
pub use error::{Error, Result};
pub use kernel::{default_steps, fk_kernel_grid, FKKernel};
pub use measure::{
    marginals, measure_distance, relative_entropy, DiscreteMeasure, Grid, MeasureDistance,
    PairMeasure,
};
pub use potential::TrapPotential;
pub use sampling::{McEstimate, Moments, SeedPlan};
pub use spectral::{
    discretize_hamiltonian, dv_duality_check, dv_rate, ground_state, principal_eigenpair,
    DualityCheck, Hamiltonian, SpectralResult,
};
pub use transport::{
    build_t_operator, effective_kernel, factorization_check, mass_kernel,
    minimizing_pair_measure, schrodinger_objective, sinkhorn_bridge, solve_symmetric, t_eigenpair,
    PairWeight, PerronPair, SchrodingerSolution, SinkhornSolution,
};
pub use ensemble::{
    cycle_type, ensemble_estimates, free_energy_curve, log_sym_traces, run_ensemble,
    sample_permutation, sample_sym_ensemble, sym_trace_exact, EnsembleAccumulator,
    EnsembleEstimates, EnsembleSample, EnsembleSpec, Permutation,
};
