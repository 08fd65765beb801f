#![allow(clippy::needless_range_loop)]

use fgcca::deflation::{deflate_orthogonal, deflate_set, deflate_uncorrelated, fit_higher_order};
use fgcca::numerics::{apply_adjoint, apply_operator, inner_product, GridFunction};
use fgcca::operators::OperatorSet;
use fgcca::sim::random_operators;
use fgcca::solver::{
    build_metrics, criterion, fit_from, fit_single, gradient, DeflationMode, FgccaConfig, Init, Scheme,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: usize = 12;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Identity), Just(Scheme::Square), Just(Scheme::Abs)]
}

fn tau() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.3), Just(0.7), Just(1.0)]
}

/// Symmetric design with a zero diagonal and entries in `[0, 1]`, with at
/// least one positive entry.
fn random_design(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in j + 1..n {
            let v: f64 = rng.random_range(0.0..1.0);
            c[j][k] = v;
            c[k][j] = v;
        }
    }
    c[0][1] = c[0][1].max(0.2);
    c[1][0] = c[0][1];
    c
}

fn random_function(ops: &OperatorSet, j: usize, rng: &mut ChaCha8Rng) -> GridFunction {
    let g = ops.grid(j).clone();
    let v = DVector::from_fn(g.len(), |_, _| rng.random_range(-1.0..1.0));
    GridFunction::new(g, v).unwrap()
}

fn config(n: usize, scheme: Scheme, tau: f64, design: Vec<Vec<f64>>) -> FgccaConfig {
    let mut c = FgccaConfig::new(n);
    c.scheme = scheme;
    c.tau = vec![tau; n];
    c.design = design;
    c.epsilon = 1e-12;
    c.max_iters = 200;
    c
}

fn cosine(a: &GridFunction, b: &GridFunction) -> f64 {
    inner_product(a, b).unwrap() / (a.norm() * b.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn criterion_never_decreases(
        n in 2usize..=3, scheme in scheme(), tau in tau(), seed in any::<u64>(), rank in 1usize..6,
    ) {
        let ops = random_operators(n, GRID, rank, seed).unwrap();
        let mut cfg = config(n, scheme, tau, random_design(n, seed ^ 1));
        cfg.init = Init::Random { seed };
        let state = fit_single(&ops, &cfg).unwrap();
        for w in state.criterion_trace.windows(2) {
            prop_assert!(w[1] - w[0] >= -1e-10, "{:?}", state.criterion_trace);
        }
    }

    #[test]
    fn fitted_functions_satisfy_the_constraint(
        n in 2usize..=3, scheme in scheme(), tau in tau(), seed in any::<u64>(),
    ) {
        let ops = random_operators(n, GRID, 4, seed).unwrap();
        let cfg = config(n, scheme, tau, random_design(n, seed ^ 2));
        let state = fit_single(&ops, &cfg).unwrap();
        let metrics = build_metrics(&cfg, &ops).unwrap();
        for (f, m) in state.functions.iter().zip(&metrics) {
            prop_assert!((m.quadratic_form(f.values()) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences(
        n in 2usize..=3, scheme in prop_oneof![Just(Scheme::Identity), Just(Scheme::Square)], seed in any::<u64>(),
    ) {
        let ops = random_operators(n, GRID, 3, seed).unwrap();
        let design = random_design(n, seed ^ 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let f: Vec<GridFunction> = (0..n).map(|j| random_function(&ops, j, &mut rng)).collect();
        for j in 0..n {
            let g = gradient(j, &f, &ops, &design, scheme);
            let e = random_function(&ops, j, &mut rng);
            let h = 1e-5;
            let shifted = |s: f64| {
                let mut fs = f.clone();
                fs[j] = GridFunction::new(f[j].grid().clone(), f[j].values() + e.values() * s).unwrap();
                criterion(&fs, &ops, &design, scheme)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = inner_product(&g, &e).unwrap();
            prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn scaling_operators_leaves_functions_unchanged(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let ops = random_operators(3, GRID, 4, seed).unwrap();
        let cfg = config(3, Scheme::Identity, 1.0, random_design(3, seed));
        let a = fit_single(&ops, &cfg).unwrap();
        let b = fit_single(&ops.scaled(factor), &cfg).unwrap();
        for (x, y) in a.functions.iter().zip(&b.functions) {
            prop_assert!(cosine(x, y) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn orthogonal_deflation_annihilates_functions(seed in any::<u64>()) {
        let ops = random_operators(2, GRID, 5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |f: GridFunction| { let n = f.norm(); f.scaled(1.0 / n) };
        let fj = unit(random_function(&ops, 0, &mut rng));
        let fk = unit(random_function(&ops, 1, &mut rng));
        let d = deflate_orthogonal(ops.upper(0, 1), &fj, &fk).unwrap();
        prop_assert!(apply_operator(&d, &fk).unwrap().values().amax() < 1e-10);
        prop_assert!(apply_adjoint(&d, &fj).unwrap().values().amax() < 1e-10);
    }

    #[test]
    fn uncorrelated_deflation_annihilates_functions(seed in any::<u64>()) {
        let ops = random_operators(2, GRID, 6, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fj = random_function(&ops, 0, &mut rng);
        let fk = random_function(&ops, 1, &mut rng);
        let d = deflate_uncorrelated(ops.upper(0, 1), ops.upper(0, 0), ops.upper(1, 1), &fj, &fk).unwrap();
        let scale = ops.upper(0, 1).kernel().amax().max(1.0);
        prop_assert!(apply_operator(&d, &fk).unwrap().values().amax() < 1e-10 * scale);
        prop_assert!(apply_adjoint(&d, &fj).unwrap().values().amax() < 1e-10 * scale);
    }

    #[test]
    fn deflated_set_annihilates_every_pair(seed in any::<u64>()) {
        let ops = random_operators(3, GRID, 5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<GridFunction> = (0..3).map(|j| {
            let g = random_function(&ops, j, &mut rng);
            let n = g.norm();
            g.scaled(1.0 / n)
        }).collect();
        let (next, _) = deflate_set(&ops, &f, DeflationMode::Orthogonal, 1).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let op = next.get(j, k);
                prop_assert!(apply_operator(&op, &f[k]).unwrap().values().amax() < 1e-10);
            }
        }
    }

    #[test]
    fn orthogonal_mode_gram_is_identity(seed in any::<u64>(), tau in tau()) {
        let ops = random_operators(2, GRID, 8, seed).unwrap();
        let mut cfg = config(2, Scheme::Identity, tau, random_design(2, 0));
        cfg.n_components = 4;
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        for j in 0..2 {
            let fs = fit.process_functions(j);
            for a in 0..4 {
                for b in 0..4 {
                    let ip = inner_product(fs[a], fs[b]).unwrap();
                    let target = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((ip - target).abs() < 1e-8, "({a},{b}) = {ip}");
                }
            }
        }
    }

    #[test]
    fn uncorrelated_mode_consecutive_functions_are_orthogonal(seed in any::<u64>()) {
        let ops = random_operators(2, GRID, 8, seed).unwrap();
        let mut cfg = config(2, Scheme::Identity, 1.0, random_design(2, 0));
        cfg.n_components = 3;
        cfg.deflation = DeflationMode::Uncorrelated;
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        for j in 0..2 {
            let fs = fit.process_functions(j);
            for m in 0..2 {
                prop_assert!(inner_product(fs[m], fs[m + 1]).unwrap().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn restarting_at_the_optimum_stays_there(seed in any::<u64>()) {
        let ops = random_operators(2, GRID, 3, seed).unwrap();
        let cfg = config(2, Scheme::Identity, 1.0, random_design(2, 0));
        let first = fit_single(&ops, &cfg).unwrap();
        let again = fit_from(&ops, &cfg, &first.functions).unwrap();
        let last = |s: &fgcca::solver::SolverState| *s.criterion_trace.last().unwrap();
        prop_assert!((last(&again) - last(&first)).abs() <= 1e-8 * last(&first).abs().max(1.0));
    }
}
