use std::collections::HashMap;
use std::f64::consts::PI;

use itertools::Itertools;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use symbridge::{
    cycle_type, ensemble_estimates, fk_kernel_grid, free_energy_curve, ground_state,
    log_sym_traces, run_ensemble, sample_permutation, sample_sym_ensemble, sym_trace_exact,
    DiscreteMeasure, EnsembleSample, EnsembleSpec, FKKernel, Grid, PairWeight, PathSample,
    SeedPlan, TrapPotential,
};

fn trace_of_power(a: &Array2<f64>, l: usize) -> f64 {
    let mut p = a.clone();
    for _ in 1..l {
        p = p.dot(a);
    }
    p.diag().sum()
}

/// `(1/N!) Σ_σ Π_cycles Tr(A^len)` by enumerating every permutation.
fn brute_force_trace(a: &Array2<f64>, n: usize) -> f64 {
    let traces: Vec<f64> = (1..=n).map(|l| trace_of_power(a, l)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for sigma in (0..n).permutations(n) {
        total += cycle_type(&sigma).iter().map(|&l| traces[l - 1]).product::<f64>();
        count += 1;
    }
    total / count as f64
}

/// `(1/N!) Σ_σ Σ_{x_1..x_N} Π_i A[x_i, x_σ(i)]`, the defining sum itself.
fn naive_grid_sum(a: &Array2<f64>, n: usize) -> f64 {
    let nodes = a.nrows();
    let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let mut total = 0.0;
    for xs in (0..n).map(|_| 0..nodes).multi_cartesian_product() {
        for sigma in &perms {
            total += (0..n).map(|i| a[[xs[i], xs[sigma[i]]]]).product::<f64>();
        }
    }
    total / perms.len() as f64
}

fn small_kernel(nodes: usize) -> FKKernel {
    let g = Grid::interval(-2.0, 2.0, nodes).unwrap();
    fk_kernel_grid(&TrapPotential::harmonic(1), 0.7, &g, Some(50)).unwrap()
}

#[test]
fn permutations_of_three_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 100_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..n {
        *counts.entry(sample_permutation(3, &mut rng).unwrap().sigma).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let p = 1.0 / 6.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts.values() {
        assert!((*c as f64 / n as f64 - p).abs() < 3.0 * se);
    }
}

#[test]
fn four_cycles_have_probability_one_quarter() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| sample_permutation(4, &mut rng).unwrap().cycle_type == vec![4])
        .count();
    let se = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - 0.25).abs() < 3.0 * se);
}

#[test]
fn cycle_type_frequencies_pass_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for n in 2..=6 {
        // Exact cycle-type probabilities by enumeration.
        let mut exact: HashMap<Vec<usize>, f64> = HashMap::new();
        let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
        for s in &perms {
            *exact.entry(cycle_type(s)).or_default() += 1.0 / perms.len() as f64;
        }
        let draws = 20_000;
        let mut seen: HashMap<Vec<usize>, f64> = HashMap::new();
        for _ in 0..draws {
            *seen.entry(sample_permutation(n, &mut rng).unwrap().cycle_type).or_default() += 1.0;
        }
        let stat: f64 = exact
            .iter()
            .map(|(k, p)| {
                let e = p * draws as f64;
                let o = seen.get(k).copied().unwrap_or(0.0);
                (o - e) * (o - e) / e
            })
            .sum();
        let dof = (exact.len() - 1) as f64;
        let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(p_value > 0.01, "N={n}: chi2 {stat}, p {p_value}");
    }
}

#[test]
fn recursion_matches_small_cases() {
    let k = small_kernel(20);
    let a = k.scaled();
    let t1 = trace_of_power(&a, 1);
    let t2 = trace_of_power(&a, 2);
    assert!((sym_trace_exact(&k, 1).unwrap() - t1).abs() < 1e-12 * t1);
    let two = 0.5 * (t1 * t1 + t2);
    assert!((sym_trace_exact(&k, 2).unwrap() - two).abs() < 1e-12 * two);
}

#[test]
fn recursion_matches_permutation_brute_force() {
    let k = small_kernel(20);
    let a = k.scaled();
    for n in 1..=6 {
        let exact = brute_force_trace(&a, n);
        let rec = sym_trace_exact(&k, n).unwrap();
        assert!((rec - exact).abs() / exact < 1e-10, "N={n}: {rec} vs {exact}");
    }
}

#[test]
fn recursion_matches_the_defining_grid_sum() {
    let k = small_kernel(4);
    let a = k.scaled();
    for n in 1..=4 {
        let exact = naive_grid_sum(&a, n);
        let rec = sym_trace_exact(&k, n).unwrap();
        assert!((rec - exact).abs() / exact < 1e-10, "N={n}");
    }
}

#[test]
fn log_domain_survives_large_n() {
    let k = small_kernel(20);
    let logs = log_sym_traces(&k, 30).unwrap();
    assert!(logs.iter().all(|v| v.is_finite()));
}

#[test]
fn free_energy_approaches_the_ground_state_energy() {
    let w = TrapPotential::hard_wall(&[(0.0, PI)]).unwrap();
    let g = Grid::interval(0.0, PI, 201).unwrap();
    let k = fk_kernel_grid(&w, 1.0, &g, None).unwrap();
    let curve = free_energy_curve(&k, 12).unwrap();
    let target = ground_state(&w, &g).unwrap().lambda;
    let err: Vec<f64> = curve.iter().map(|v| (v - target).abs()).collect();
    assert!(err[11] / target < 0.05, "{curve:?}");
    assert!(err[6..].windows(2).all(|p| p[1] <= p[0]));
    assert!((curve[0] + k.scaled().diag().sum().ln()).abs() < 1e-12);

    let shifted = free_energy_curve(&k.shifted(0.3), 12).unwrap();
    for (a, b) in curve.iter().zip(&shifted) {
        assert!((b - a - 0.3).abs() < 1e-10);
    }
}

fn uniform_on_nodes(g: &Grid) -> DiscreteMeasure {
    DiscreteMeasure::from_masses(g.clone(), &vec![1.0; g.len()]).unwrap()
}

#[test]
fn zero_potential_gives_unit_weights() {
    let g = Grid::interval(-1.0, 1.0, 11).unwrap();
    let spec = EnsembleSpec::new(uniform_on_nodes(&g), 4, 1.0, 10, TrapPotential::constant(0.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<EnsembleSample> = (0..50).map(|_| sample_sym_ensemble(&spec, &mut rng).unwrap()).collect();
    assert!(samples.iter().all(|s| s.log_weight == 0.0));
    for s in &samples {
        for (i, p) in s.paths.iter().enumerate() {
            assert_eq!(p.start(), g.node(s.start_nodes[i]).as_slice());
            assert_eq!(p.end(), g.node(s.start_nodes[s.permutation.sigma[i]]).as_slice());
        }
    }
    let est = ensemble_estimates(&samples, &g, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(est.z_hat.mean, 1.0);
    assert_eq!(est.z_hat.std_error, 0.0);
}

#[test]
fn single_particle_paths_are_loops() {
    let g = Grid::interval(-1.0, 1.0, 11).unwrap();
    let spec = EnsembleSpec::new(uniform_on_nodes(&g), 1, 1.0, 10, TrapPotential::harmonic(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = sample_sym_ensemble(&spec, &mut rng).unwrap();
        assert_eq!(s.permutation.sigma, vec![0]);
        assert_eq!(s.paths[0].start(), s.paths[0].end());
    }
}

#[test]
fn hard_wall_weights_vanish_exactly_on_exit() {
    let g = Grid::interval(0.0, 1.0, 11).unwrap();
    let w = TrapPotential::hard_wall(&[(0.0, 1.0)]).unwrap();
    let inside: Vec<f64> = (0..11).map(|i| if i == 0 || i == 10 { 0.0 } else { 1.0 }).collect();
    let m = DiscreteMeasure::from_masses(g, &inside).unwrap();
    let spec = EnsembleSpec::new(m, 3, 0.5, 20, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut zeros = 0;
    for _ in 0..500 {
        let s = sample_sym_ensemble(&spec, &mut rng).unwrap();
        let exits = s
            .paths
            .iter()
            .any(|p| (0..=p.steps()).any(|k| !(0.0..=1.0).contains(&p.position(k)[0])));
        let wgt = s.log_weight.exp();
        assert!((0.0..=1.0).contains(&wgt));
        if exits {
            assert_eq!(wgt, 0.0);
            zeros += 1;
        } else {
            assert!(wgt > 0.0);
        }
    }
    assert!(zeros > 0);
}

#[test]
fn constant_path_occupation_is_a_point_mass() {
    let g = Grid::interval(0.0, 1.0, 11).unwrap();
    let x = g.node(4);
    let path = PathSample::constant(&x, 1.0, 8).unwrap();
    let sample = EnsembleSample {
        permutation: sample_permutation(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        start_nodes: vec![4],
        paths: vec![path],
        log_weight: 0.0,
        log_pair_weight: 0.0,
    };
    let est = ensemble_estimates(&[sample], &g, &[0.5]).unwrap();
    let masses = est.y_hat.masses();
    assert!((masses[4] - 1.0).abs() < 1e-12);
    assert!(masses.iter().enumerate().all(|(i, m)| i == 4 || *m == 0.0));
}

#[test]
fn endpoint_marginals_coincide() {
    let g = Grid::interval(-3.0, 3.0, 31).unwrap();
    let spec = EnsembleSpec::new(uniform_on_nodes(&g), 5, 1.0, 16, TrapPotential::harmonic(1)).unwrap();
    let est = run_ensemble(&spec, 2000, SeedPlan::new(4), &g, &[0.0, 1.0]).unwrap();
    let d = symbridge::measure_distance(&est.l_marginals[0], &est.l_marginals[1]).unwrap();
    assert!(d.total_variation < 1e-12);
}

fn z_coverage(spec: &EnsembleSpec, exact: f64, seed0: u64) -> usize {
    let g = spec.m.grid().clone();
    (0..10)
        .filter(|s| {
            let est = run_ensemble(spec, 20_000, SeedPlan::new(seed0 + s), &g, &[]).unwrap();
            (est.z_hat.mean - exact).abs() < 3.0 * est.z_hat.std_error
        })
        .count()
}

/// With `g = p_β` and `m` uniform over the nodes, `E[weight] = h_N / (n^d h^d)^N`.
#[test]
fn partition_estimate_matches_exact_trace_in_a_box() {
    let g = Grid::interval(0.0, 2.0, 5).unwrap();
    let w = TrapPotential::hard_wall(&[(0.0, 2.0)]).unwrap();
    let beta = 0.5;
    let k = fk_kernel_grid(&w, beta, &g, None).unwrap();
    let n_particles = 2;
    let exact = sym_trace_exact(&k, n_particles).unwrap()
        / (g.len() as f64 * g.cell_volume()).powi(n_particles as i32);
    let spec = EnsembleSpec::new(uniform_on_nodes(&g), n_particles, beta, 32, w)
        .unwrap()
        .with_pair_weight(PairWeight::FreeKernel)
        .unwrap();
    // Each interval covers with probability ~0.997.
    assert!(z_coverage(&spec, exact, 1000) >= 9);
}

/// Soft trap: the kernel lives on a wide grid, starts on its central nodes.
#[test]
fn partition_estimate_matches_exact_trace_in_a_harmonic_trap() {
    let wide = Grid::interval(-6.0, 6.0, 13).unwrap();
    let w = TrapPotential::harmonic(1);
    let beta = 0.5;
    let k = fk_kernel_grid(&w, beta, &wide, None).unwrap();
    let centre = Grid::interval(-2.0, 2.0, 5).unwrap();
    let sub = FKKernel {
        grid: centre.clone(),
        matrix: k.matrix.slice(ndarray::s![4..9, 4..9]).to_owned(),
        ..k.clone()
    };
    for n_particles in [2, 3] {
        let exact = sym_trace_exact(&sub, n_particles).unwrap()
            / (centre.len() as f64 * centre.cell_volume()).powi(n_particles as i32);
        let spec = EnsembleSpec::new(uniform_on_nodes(&centre), n_particles, beta, 32, w.clone())
            .unwrap()
            .with_pair_weight(PairWeight::FreeKernel)
            .unwrap();
        assert!(z_coverage(&spec, exact, 2000) >= 9, "N={n_particles}");
    }
}

#[test]
fn ensemble_run_is_reproducible() {
    let g = Grid::interval(-2.0, 2.0, 21).unwrap();
    let spec = EnsembleSpec::new(uniform_on_nodes(&g), 3, 1.0, 16, TrapPotential::harmonic(1)).unwrap();
    let a = run_ensemble(&spec, 3000, SeedPlan::new(9), &g, &[0.5]).unwrap();
    let b = run_ensemble(&spec, 3000, SeedPlan::new(9), &g, &[0.5]).unwrap();
    assert_eq!(a, b);
}

mod invariants {
    use super::*;
    use proptest::prelude::*;

    const NODES: usize = 5;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cycle_recursion_matches_permutation_sum(entries in prop::collection::vec(0.01f64..3.0, NODES * NODES)) {
            let grid = Grid::interval(0.0, 1.0, NODES).unwrap();
            let e = Array2::from_shape_vec((NODES, NODES), entries).unwrap();
            let k = FKKernel {
                grid: grid.clone(),
                beta: 1.0,
                steps: 1,
                refine: 1,
                matrix: (&e + &e.t()) / 2.0,
                coarse_warning: false,
            };
            let a = k.scaled();
            let logs = log_sym_traces(&k, 5).unwrap();
            for n in 1..=5 {
                let exact = brute_force_trace(&a, n);
                prop_assert!((logs[n].exp() - exact).abs() <= 1e-10 * exact, "N={}", n);
            }
        }

        #[test]
        fn permutations_are_bijections(n in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_permutation(n, &mut rng).unwrap();
            let mut seen = vec![false; n];
            for &j in &p.sigma {
                prop_assert!(j < n && !seen[j]);
                seen[j] = true;
            }
            prop_assert_eq!(p.cycle_type.iter().sum::<usize>(), n);
            prop_assert_eq!(&cycle_type(&p.sigma), &p.cycle_type);
        }
    }
}
