mod common;

use advof_core::geometry::EMPTY;
use advof_core::optimizer::{
    evaluate_objective, optimize_view, AdamConfig, AdamState, OptimizeConfig, Perturbation, ViewProblem,
};
use advof_core::Error;
use proptest::prelude::*;
use rand::Rng;

const EPS: f64 = 32.0 / 255.0;

#[test]
fn bound_holds_after_every_fuzzed_step() {
    let mut r = common::rng(99);
    let n = 64;
    for lr in [1e-3, 0.01, 0.5, 10.0] {
        let mut adam = AdamState::new(n, AdamConfig { lr, ..AdamConfig::default() });
        let mut var = vec![0.0; n];
        for _ in 0..1000 {
            let scale = 10f64.powi(r.random_range(-8..=8));
            let grad: Vec<f64> = (0..n).map(|_| scale * r.random_range(-1.0..1.0)).collect();
            adam.step(&mut var, &grad, EPS).unwrap();
            let linf = var.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(linf <= EPS, "lr {lr}: linf {linf} exceeds {EPS}");
        }
    }
}

#[test]
fn zero_gradient_leaves_state_untouched() {
    let mut adam = AdamState::new(4, AdamConfig::default());
    let mut var = vec![0.01, -0.02, 0.0, 0.1];
    let before = var.clone();
    for _ in 0..10 {
        adam.step(&mut var, &[0.0; 4], EPS).unwrap();
    }
    assert_eq!(var, before);
    assert!(adam.m.iter().chain(&adam.v).all(|&x| x == 0.0));
}

#[test]
fn first_step_matches_closed_form() {
    let cfg = AdamConfig::default();
    for g in [1e-6, 0.3, -2.0, 50.0] {
        let mut adam = AdamState::new(1, cfg);
        let mut var = vec![0.0];
        adam.step(&mut var, &[g], 1.0).unwrap();
        // m̂ = g, v̂ = g², so Δ = −η·g/(|g| + ε).
        let expect = -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((var[0] - expect).abs() <= 1e-15, "g {g}: {} vs {expect}", var[0]);
        assert!(var[0].abs() <= cfg.lr * (1.0 + cfg.eps));
    }
}

#[test]
fn projection_clamps_out_of_bound_entries() {
    let mut adam = AdamState::new(3, AdamConfig::default());
    let mut var = vec![1.0, -1.0, 0.0];
    adam.step(&mut var, &[0.0, 0.0, 0.0], EPS).unwrap();
    assert_eq!(var, vec![EPS, -EPS, 0.0]);
}

#[test]
fn non_finite_gradient_reports_context() {
    let mut adam = AdamState::new(2, AdamConfig::default()).for_view(7);
    let mut var = vec![0.0; 2];
    adam.step(&mut var, &[0.1, 0.1], EPS).unwrap();
    match adam.step(&mut var, &[0.0, f64::NAN], EPS) {
        Err(Error::Optimization { view, iteration, .. }) => assert_eq!((view, iteration), (7, 1)),
        other => panic!("expected an optimization error, got {other:?}"),
    }
}

fn problem(f: &common::Fixture) -> ViewProblem<'_> {
    ViewProblem {
        cloud: &f.cloud,
        camera: &f.camera,
        victim: &f.victim,
        rendered: &f.rendered,
        mask: &f.mask,
        benign: &f.benign,
        label_embedding: &f.embedding,
        exemplar: None,
    }
}

#[test]
fn zero_iterations_return_the_input() {
    let f = common::fixture(1, 24, 120);
    let delta = Perturbation::zeros(f.cloud.len(), EPS);
    let config = OptimizeConfig { iterations: 0, ..OptimizeConfig::default() };
    let run = optimize_view(&delta, &problem(&f), &f.encoder, 1.0, EPS, &config).unwrap().unwrap();
    assert_eq!(run.delta, delta);
    assert!(run.trace.is_empty());
}

#[test]
fn only_visible_victim_points_move() {
    let f = common::fixture(2, 24, 120);
    let config = OptimizeConfig { lambda_3d: 0.0, ..OptimizeConfig::default() };
    let delta = Perturbation::zeros(f.cloud.len(), EPS);
    let run = optimize_view(&delta, &problem(&f), &f.encoder, 1.0, EPS, &config).unwrap().unwrap();
    let visible: std::collections::BTreeSet<u32> = f.rendered.index.iter().copied().filter(|&i| i != EMPTY).collect();
    let mut moved = 0;
    for (i, d) in run.delta.rgb().iter().enumerate() {
        if *d != [0.0; 3] {
            assert!(f.victim[i] && visible.contains(&(i as u32)), "point {i} moved");
            moved += 1;
        }
    }
    assert!(moved > 0);
    assert!(run.delta.linf() <= EPS);
}

#[test]
fn runs_are_deterministic_and_trace_matches_recomputation() {
    let f = common::fixture(3, 24, 120);
    let p = problem(&f);
    let config = OptimizeConfig { iterations: 30, lambda_3d: 0.01, ..OptimizeConfig::default() };
    let delta = Perturbation::zeros(f.cloud.len(), EPS);
    let a = optimize_view(&delta, &p, &f.encoder, 0.4, EPS, &config).unwrap().unwrap();
    let b = optimize_view(&delta, &p, &f.encoder, 0.4, EPS, &config).unwrap().unwrap();
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.trace.len(), 30);
    let last = a.trace.last().unwrap();
    let again = evaluate_objective(&a.delta, &p, &f.encoder, 0.4, &config).unwrap();
    assert!((again.objective - last.objective).abs() <= 1e-9);
}

#[test]
fn untargeted_run_lowers_i2i() {
    let f = common::fixture(4, 24, 120);
    let config = OptimizeConfig { iterations: 200, ..OptimizeConfig::default() };
    let delta = Perturbation::zeros(f.cloud.len(), EPS);
    let run = optimize_view(&delta, &problem(&f), &f.encoder, 1.0, EPS, &config).unwrap().unwrap();
    let initial = run.initial.unwrap().breakdown.i2i;
    let last = run.trace.last().unwrap().breakdown.i2i;
    assert!(last < initial, "i2i {initial} -> {last}");
}

#[test]
fn invisible_victim_is_a_skip() {
    let f = common::fixture(5, 24, 120);
    let nobody = vec![false; f.cloud.len()];
    let p = ViewProblem { victim: &nobody, ..problem(&f) };
    let delta = Perturbation::zeros(f.cloud.len(), EPS);
    assert!(optimize_view(&delta, &p, &f.encoder, 1.0, EPS, &OptimizeConfig::default()).unwrap().is_none());
}

#[test]
fn perturbation_rejects_out_of_bound_parts() {
    assert!(Perturbation::from_parts(vec![[0.2, 0.0, 0.0]], None, 0.1).is_err());
    assert!(Perturbation::from_parts(vec![[0.1, -0.1, 0.0]], None, 0.1).is_ok());
}

proptest! {
    #[test]
    fn every_step_stays_in_bound(
        grads in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 8), 1..40),
        bound in 1e-4f64..1.0,
        lr in 1e-4f64..5.0,
    ) {
        let mut adam = AdamState::new(8, AdamConfig { lr, ..AdamConfig::default() });
        let mut var = vec![0.0; 8];
        for g in &grads {
            adam.step(&mut var, g, bound).unwrap();
            prop_assert!(var.iter().all(|v| v.abs() <= bound));
        }
    }
}
