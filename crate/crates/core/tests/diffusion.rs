use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;
use symbridge::{
    ergodic_occupation, fk_kernel_grid, ground_state, ground_state_drift, martingale_check,
    measure_distance, schrodinger_process_sampler, simulate_ergodic_sde, solve_symmetric,
    DiscreteMeasure, Grid, PairWeight, SeedPlan, SpectralResult, TrapPotential,
};

fn harmonic() -> (TrapPotential, SpectralResult) {
    let w = TrapPotential::harmonic(1);
    let g = Grid::interval(-8.0, 8.0, 401).unwrap();
    let s = ground_state(&w, &g).unwrap();
    (w, s)
}

fn hard_wall() -> (TrapPotential, SpectralResult) {
    let w = TrapPotential::hard_wall(&[(0.0, PI)]).unwrap();
    let g = Grid::interval(0.0, PI, 201).unwrap();
    let s = ground_state(&w, &g).unwrap();
    (w, s)
}

/// Exact mass of each nearest-node cell under the density with CDF `cdf`.
fn cell_masses(g: &Grid, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
    let h = g.spacing(0);
    (0..g.len())
        .map(|i| {
            let x = g.coord(0, i);
            let a = (x - h / 2.0).max(g.lower()[0]);
            let b = (x + h / 2.0).min(g.upper()[0]);
            cdf(b) - cdf(a)
        })
        .collect()
}

fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

#[test]
fn harmonic_drift_is_linear() {
    let (_, s) = harmonic();
    let d = ground_state_drift(&s).unwrap();
    for i in 0..s.grid.len() {
        let x = s.grid.coord(0, i);
        if x.abs() <= 1.5 {
            assert!((d.at_node(i)[0] + 2.0 * x).abs() < 1e-3, "x={x}: {}", d.at_node(i)[0]);
        }
    }
    assert!(d.at_node(200)[0].abs() < 1e-9);
    assert!((d.eval(&[0.51])[0] + 1.02).abs() < 2e-3);
}

#[test]
fn hard_wall_drift_is_cotangent() {
    let (_, s) = hard_wall();
    let d = ground_state_drift(&s).unwrap();
    for i in 0..s.grid.len() {
        let x = s.grid.coord(0, i);
        if (0.3..=PI - 0.3).contains(&x) {
            let exact = 2.0 / x.tan();
            assert!((d.at_node(i)[0] - exact).abs() < 1e-2, "x={x}");
        }
    }
}

#[test]
fn occupation_approaches_phi_squared() {
    let (w, s) = harmonic();
    let drift = ground_state_drift(&s).unwrap();
    let init = s.density().unwrap();
    let run = ergodic_occupation(&drift, &w, &init, 1000.0, 1e-3, 8, SeedPlan::new(11)).unwrap();
    let occ = run.occupation(&s.grid).unwrap().masses();
    let exact = cell_masses(&s.grid, |x| 0.5 * (1.0 + erf(x)));
    let dist = l1(&occ, &exact);
    assert!(dist < 0.1, "harmonic L1 {dist}");
    assert!(!run.flagged());

    let (w, s) = hard_wall();
    let drift = ground_state_drift(&s).unwrap();
    let init = s.density().unwrap();
    let run = ergodic_occupation(&drift, &w, &init, 1000.0, 1e-3, 8, SeedPlan::new(12)).unwrap();
    let occ = run.occupation(&s.grid).unwrap().masses();
    let exact = cell_masses(&s.grid, |x| (x - (2.0 * x).sin() / 2.0) / PI);
    let dist = l1(&occ, &exact);
    assert!(dist < 0.1, "hard wall L1 {dist}");
    assert!(run.rejections > 0 && !run.flagged());
}

#[test]
fn occupation_is_reproducible_and_chain_order_free() {
    let (w, s) = hard_wall();
    let drift = ground_state_drift(&s).unwrap();
    let init = s.density().unwrap();
    let a = ergodic_occupation(&drift, &w, &init, 5.0, 1e-3, 3, SeedPlan::new(4)).unwrap();
    let b = ergodic_occupation(&drift, &w, &init, 5.0, 1e-3, 3, SeedPlan::new(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.counts.iter().sum::<f64>(), 3.0 * 5001.0);
}

#[test]
fn stationary_start_stays_stationary() {
    // Time slices of many short chains started from φ².
    let (w, s) = harmonic();
    let drift = ground_state_drift(&s).unwrap();
    let init = s.density().unwrap();
    let coarse = Grid::interval(-8.0, 8.0, 41).unwrap();
    let mut slices = vec![vec![0.0; coarse.len()]; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20_000 {
        let run = simulate_ergodic_sde(&drift, &w, &init, 1.0, 1e-3, 250, &mut rng).unwrap();
        for (k, (_, x)) in run.trajectory.iter().skip(1).enumerate() {
            slices[k][coarse.nearest_node(x)] += 1.0;
        }
    }
    let exact = cell_masses(&coarse, |x| 0.5 * (1.0 + erf(x)));
    for sl in &slices {
        let total: f64 = sl.iter().sum();
        let p: Vec<f64> = sl.iter().map(|c| c / total).collect();
        assert!(l1(&p, &exact) < 0.05, "{}", l1(&p, &exact));
    }
}

#[test]
fn girsanov_density_has_unit_mean() {
    let (w, s) = harmonic();
    for (k, x) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let est = martingale_check(&[x], 1.0, s.lambda, &s, &w, 100_000, 100, SeedPlan::new(40 + k as u64)).unwrap();
        assert!(est.z_score(1.0) < 3.0, "x={x}: {est:?}");
    }
    let (w, s) = hard_wall();
    for (k, x) in [0.5, PI / 2.0, 2.5].into_iter().enumerate() {
        let est = martingale_check(&[x], 1.0, s.lambda, &s, &w, 100_000, 100, SeedPlan::new(50 + k as u64)).unwrap();
        assert!(est.z_score(1.0) < 3.0, "x={x}: {est:?}");
    }
}

#[test]
fn girsanov_density_detects_a_wrong_eigenvalue() {
    let (w, s) = harmonic();
    let est = martingale_check(&[0.5], 1.0, s.lambda + 0.1, &s, &w, 100_000, 100, SeedPlan::new(60)).unwrap();
    assert!(est.z_score(1.0) > 10.0);
    assert!(est.z_score(0.1f64.exp()) < 3.0, "{est:?}");
}

#[test]
fn girsanov_density_tends_to_one_for_short_horizons() {
    let (w, s) = harmonic();
    let est = martingale_check(&[0.7], 1e-4, s.lambda, &s, &w, 10_000, 4, SeedPlan::new(61)).unwrap();
    assert!((est.mean - 1.0).abs() < 1e-3, "{est:?}");
}

#[test]
fn martingale_start_outside_support_is_rejected() {
    let (w, s) = hard_wall();
    assert!(martingale_check(&[0.0], 1.0, s.lambda, &s, &w, 10, 10, SeedPlan::new(0)).is_err());
}

#[test]
fn sampler_marginals_and_symmetry() {
    let w = TrapPotential::harmonic(1);
    let g = Grid::interval(-5.0, 5.0, 51).unwrap();
    let k = fk_kernel_grid(&w, 1.0, &g, None).unwrap();
    let m = DiscreteMeasure::lebesgue(g.clone());
    let sol = solve_symmetric(&k, &PairWeight::FreeKernel, &m).unwrap();
    let out = schrodinger_process_sampler(sol.q_star(), &k, &w, 16, 10_000, SeedPlan::new(70)).unwrap();
    assert_eq!(out.paths.len(), 10_000);
    assert!(!out.low_ess);
    let target = sol.marginal(&m).unwrap();
    let start = out.marginal(&g, 0.0).unwrap();
    let tv = measure_distance(&start, &target).unwrap().total_variation;
    assert!(tv < 0.05, "start TV {tv}");

    // Asymmetry of the endpoint coupling against a bootstrap of itself.
    let joint = out.endpoint_coupling(&g).unwrap();
    let asym = joint.tv_distance(&joint.transpose()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut boot = Vec::new();
    for _ in 0..20 {
        let mut counts = ndarray::Array2::<f64>::zeros((g.len(), g.len()));
        for _ in 0..out.pairs.len() {
            let (i, j) = out.pairs[rand::Rng::random_range(&mut rng, 0..out.pairs.len())];
            counts[[i, j]] += 1.0;
        }
        let total = counts.sum();
        let b = symbridge::PairMeasure::from_masses(g.clone(), counts / total).unwrap();
        boot.push(b.tv_distance(&joint).unwrap());
    }
    let boot_err = boot.iter().sum::<f64>() / boot.len() as f64;
    assert!(asym < 3.0 * boot_err, "{asym} vs {boot_err}");
}

#[test]
fn sampler_end_marginal_matches_the_diffusion() {
    let w = TrapPotential::harmonic(1);
    let g = Grid::interval(-5.0, 5.0, 101).unwrap();
    let beta = 1.0;
    let k = fk_kernel_grid(&w, beta, &g, None).unwrap();
    let m = DiscreteMeasure::lebesgue(g.clone());
    let sol = solve_symmetric(&k, &PairWeight::FreeKernel, &m).unwrap();
    let out = schrodinger_process_sampler(sol.q_star(), &k, &w, 16, 10_000, SeedPlan::new(80)).unwrap();
    let coarse = Grid::interval(-5.0, 5.0, 21).unwrap();
    let sampled = out.marginal(&coarse, beta).unwrap();

    let s = ground_state(&w, &g).unwrap();
    let drift = ground_state_drift(&s).unwrap();
    let init = s.density().unwrap();
    let mut counts = vec![0.0; coarse.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    for _ in 0..10_000 {
        let run = simulate_ergodic_sde(&drift, &w, &init, beta, 1e-3, 1000, &mut rng).unwrap();
        counts[coarse.nearest_node(&run.trajectory.last().unwrap().1)] += 1.0;
    }
    let sde = DiscreteMeasure::from_masses(coarse.clone(), &counts).unwrap();
    let tv = measure_distance(&sampled, &sde).unwrap().total_variation;
    assert!(tv < 0.05, "TV {tv}");
}

mod invariants {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// A potential symmetric about the grid centre gives an odd drift.
        #[test]
        fn symmetric_trap_gives_odd_drift(half in prop::collection::vec(0.0f64..10.0, 16)) {
            let mut values = half.clone();
            values.extend(half.iter().rev().skip(1));
            let n = values.len();
            let g = Grid::interval(-3.0, 3.0, n).unwrap();
            let w = TrapPotential::tabulated(g.clone(), values).unwrap();
            let s = ground_state(&w, &g).unwrap();
            let drift = ground_state_drift(&s).unwrap();
            let scale = drift.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..n {
                prop_assert!((drift.values[i] + drift.values[n - 1 - i]).abs() <= 1e-6 * scale.max(1.0));
            }
        }

        #[test]
        fn euler_steps_stay_in_the_box(seed in any::<u64>(), node in 1usize..200) {
            let (w, s) = hard_wall();
            let drift = ground_state_drift(&s).unwrap();
            let init = DiscreteMeasure::point_mass(s.grid.clone(), node).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = simulate_ergodic_sde(&drift, &w, &init, 0.5, 1e-3, 1, &mut rng).unwrap();
            prop_assert!(!run.trajectory.is_empty());
            prop_assert!(run.trajectory.iter().all(|(_, x)| x[0] > 0.0 && x[0] < PI));
            prop_assert_eq!(run.counts.iter().sum::<f64>() as usize, run.steps + 1);
        }
    }
}
