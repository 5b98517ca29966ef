//! Property tests for invariants that hold on every instance, not only on
//! hand-picked ones.

use std::sync::Arc;

use approx::assert_relative_eq;
use bilevel_fw::domains::Domain;
use bilevel_fw::hypergrad::aid_hypergradient;
use bilevel_fw::objectives::Quadratic;
use bilevel_fw::oracles::{ErrorContract, ExactOracle, GradientOracle, NoiseRule, PerturbedOracle};
use bilevel_fw::problems::toy::ToyQuadratic;
use bilevel_fw::solvers::{run_observed, Iterate, SolverConfig, StepType, Variant};
use bilevel_fw::stepsize::exact_stepsize;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, dim)
}

/// Small polytopes of every kind the library knows about.
fn domain() -> impl Strategy<Value = Domain> {
    prop_oneof![
        (2..6usize).prop_map(|d| Domain::unit_simplex(d).unwrap()),
        (2..5usize)
            .prop_flat_map(|d| prop::collection::vec(vec_of(d), d + 1..d + 6))
            .prop_map(|v| Domain::explicit(v).unwrap()),
        (2..5usize).prop_flat_map(|d| (vec_of(d), prop::collection::vec(0.1..1.5f64, d))).prop_map(|(lo, w)| {
            let hi = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
            Domain::boxed(lo, hi).unwrap()
        }),
        (3..7usize, 0.2..0.95f64).prop_map(|(d, frac)| Domain::capped_simplex(d, frac * (d - 1) as f64, 1.0).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lmo_beats_every_sampled_point(dom in domain(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..dom.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (v, id) = dom.lmo(&u).unwrap();
        prop_assert!(dom.membership(&v, 1e-9).unwrap());
        prop_assert_eq!(dom.vertex(&id).unwrap(), v.clone());
        for _ in 0..20 {
            let p = dom.sample_point(&mut rng);
            prop_assert!(dom.membership(&p, 1e-9).unwrap());
            prop_assert!(dot(&u, &v) <= dot(&u, &p) + 1e-9);
        }
    }

    #[test]
    fn decomposition_reconstructs_the_point(dom in domain(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = dom.sample_point(&mut rng);
        let atoms = dom.decompose(&x, 1e-10).unwrap();
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        prop_assert!(atoms.iter().all(|a| a.weight >= 0.0));
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        for j in 0..x.len() {
            let r: f64 = atoms.iter().map(|a| a.weight * a.vertex[j]).sum();
            assert_relative_eq!(r, x[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn perturbed_error_respects_contract(
        dom in domain(),
        sigma in 0.0..0.33f64,
        tau in 1e-4..1.0f64,
        adversarial in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let d = dom.dim();
        let center = vec![0.25; d];
        // ∇ ½‖x − c‖² = x − c
        let objective = Arc::new(Quadratic::squared_distance(&center, 1.0));
        let rule = if adversarial { NoiseRule::Adversarial } else { NoiseRule::RandomDirection };
        let contract = ErrorContract::new(sigma, tau).unwrap();
        let exact = ExactOracle::new(objective, dom.clone()).unwrap();
        let mut oracle = PerturbedOracle::new(exact, contract, rule, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let budget = sigma * tau / (1.0 + sigma);
        for _ in 0..5 {
            let x = dom.sample_point(&mut rng);
            let g = oracle.gradient(&x).unwrap();
            let e: Vec<f64> = g.iter().zip(x.iter().zip(&center)).map(|(gi, (xi, ci))| gi - (xi - ci)).collect();
            for _ in 0..10 {
                let (a, b) = (dom.sample_point(&mut rng), dom.sample_point(&mut rng));
                let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
                prop_assert!(dot(&e, &diff).abs() <= budget * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn exact_step_never_undershoots(
        d in vec_of(4),
        g_tilde in 1e-6..10.0f64,
        lip in 1e-3..100.0f64,
        eta_max in 0.01..1.0f64,
    ) {
        let dd = dot(&d, &d);
        prop_assume!(dd > 1e-8);
        let step = exact_stepsize(g_tilde, &d, lip, eta_max).unwrap();
        let eta_bar = eta_max.min(g_tilde / (lip * dd));
        prop_assert!(step.eta >= eta_bar * (1.0 - 1e-12));
        prop_assert!(step.eta <= eta_max);
    }

    #[test]
    fn solver_trace_invariants(
        variant in prop_oneof![Just(Variant::Fw), Just(Variant::Asfw), Just(Variant::Pwfw)],
        swap_cap in 1u32..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let vertices: Vec<Vec<f64>> = (0..8).map(|_| {
            let dom = Domain::boxed(vec![-1.0; dim], vec![1.0; dim]).unwrap();
            dom.sample_point(&mut rng)
        }).collect();
        let dom = Domain::explicit(vertices).unwrap();
        let objective = Arc::new(Quadratic::squared_distance(&[1.5, -0.5, 0.7], 1.0));
        let mut cfg = SolverConfig::new(1e-5, 0.0);
        cfg.swap_cap = swap_cap;
        cfg.max_iters = Some(300);
        let mut oracle = ExactOracle::new(objective, dom.clone()).unwrap();
        let (_, id) = dom.sample_vertex(&mut rng);
        let x0 = Iterate::from_vertex(&dom, id).unwrap();
        let mut states = Vec::new();
        let report = run_observed(variant, &mut oracle, &dom, x0, &cfg, &mut |_, it| states.push(it.clone())).unwrap();
        for it in &states {
            prop_assert!(dom.membership(it.x(), 1e-8).unwrap());
            prop_assert!(it.weights().all(|(_, w)| w >= 0.0));
            assert_relative_eq!(it.weight_sum(), 1.0, epsilon = 1e-8);
        }
        // with an exact oracle every executed step decreases f
        for w in report.trace.windows(2) {
            prop_assert!(w[1].f_value <= w[0].f_value + 1e-12);
        }
        let mut run = 0;
        for row in &report.trace {
            run = if row.step_type == StepType::Swap { run + 1 } else { 0 };
            prop_assert!(run <= swap_cap);
        }
    }
}

/// AID error on the toy problem shrinks by about `q` per extra inner step.
#[test]
fn aid_error_tracks_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let target: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
    let dom = Domain::unit_simplex(3).unwrap();
    // μ = 1, α = 0.8 gives q = 0.2
    let toy = ToyQuadratic::isotropic(a.clone(), 1.0, target.clone(), 0.8, dom).unwrap();
    let x = [0.5, 0.25, 0.25];
    let r = &a * DVector::from_column_slice(&x) - DVector::from_vec(target);
    let exact = a.transpose() * r;
    let err = |t| {
        let g = aid_hypergradient(&toy, &x, t, t).unwrap().gradient;
        (DVector::from_vec(g) - &exact).norm()
    };
    for t in 5..12 {
        assert_relative_eq!(err(t + 1) / err(t), 0.2, epsilon = 0.02);
    }
}
