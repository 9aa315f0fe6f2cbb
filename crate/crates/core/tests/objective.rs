mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use recon_core::objective::{ObjectiveSpec, RelativeDifferencePrior};
use recon_core::projector::SubsetPartition;

#[test]
fn prior_gradient_matches_finite_differences() {
    let mut rng = rng(11);
    let prior = RelativeDifferencePrior::standard(6, 7);
    for _ in 0..5 {
        let f = uniform_vec(&mut rng, 42, 0.1, 3.0);
        let grad = prior.gradient(&f).unwrap();
        for j in 0..f.len() {
            let mut e = vec![0.0; f.len()];
            e[j] = 1.0;
            let fd = directional_derivative(|x| prior.value(x).unwrap(), &f, &e, 1e-3);
            assert!((fd - grad[j]).abs() <= 1e-8 * grad[j].abs().max(1.0), "pixel {j}: {fd} vs {}", grad[j]);
        }
    }
}

#[test]
fn objective_and_subset_gradients_match_finite_differences() {
    let spec = small_objective(8, 12, 4, 0.3, 5);
    let mut rng = rng(12);
    let f = uniform_vec(&mut rng, spec.n_pixels(), 0.5, 2.0);
    let grad = spec.gradient(&f).unwrap();
    for _ in 0..10 {
        let dir = uniform_vec(&mut rng, f.len(), -1.0, 1.0);
        let fd = directional_derivative(|x| spec.value(x).unwrap(), &f, &dir, 1e-4);
        let an = dot(&grad, &dir);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        for i in 0..spec.n_subsets() {
            let gi = spec.subset_gradient(&f, i).unwrap();
            let fd = directional_derivative(|x| spec.subset_value(x, i).unwrap(), &f, &dir, 1e-4);
            let an = dot(&gi, &dir);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "subset {i}: {fd} vs {an}");
        }
    }
}

#[test]
fn hessian_form_matches_gradient_differences() {
    let spec = small_objective(8, 12, 1, 0.5, 6);
    let mut rng = rng(13);
    for _ in 0..5 {
        let f = uniform_vec(&mut rng, spec.n_pixels(), 0.5, 2.0);
        let x = uniform_vec(&mut rng, f.len(), -1.0, 1.0);
        let q = spec.hessian_quadratic_form(&f, &x).unwrap().total();
        let fd = directional_derivative(|g| dot(&spec.gradient(g).unwrap(), &x), &f, &x, 1e-4);
        assert!((fd - q).abs() <= 1e-6 * q.abs(), "{fd} vs {q}");
    }
}

#[test]
fn prior_hessian_vanishes_along_its_null_direction() {
    let mut rng = rng(14);
    let prior = RelativeDifferencePrior::standard(5, 5);
    let f = uniform_vec(&mut rng, 25, 0.2, 4.0);
    let x: Vec<f64> = f.iter().map(|v| 2.0 * v + prior.epsilon).collect();
    assert_eq!(prior.quadratic_form(&f, &x).unwrap(), 0.0);
    let mut y = x.clone();
    y[7] *= 1.5;
    assert!(prior.quadratic_form(&f, &y).unwrap() > 0.0);
}

#[test]
fn gradient_is_lipschitz_on_the_interior() {
    let spec = small_objective(6, 8, 1, 0.2, 7);
    let mut rng = rng(15);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let f1 = uniform_vec(&mut rng, spec.n_pixels(), 0.01, 5.0);
        let f2 = uniform_vec(&mut rng, spec.n_pixels(), 0.01, 5.0);
        let g1 = spec.gradient(&f1).unwrap();
        let g2 = spec.gradient(&f2).unwrap();
        let dg: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&dg) / norm(&df));
    }
    assert!(worst.is_finite() && worst > 0.0);
    println!("empirical Lipschitz bound: {worst:.4e}");
}

#[test]
fn dense_oracle_fidelity() {
    let mut rng = rng(16);
    let (p, q) = (9, 4);
    let a = dense_matrix(&mut rng, p, q);
    let dense = a.to_dense();
    let g: Vec<f64> = (0..p).map(|_| rng.gen_range(0..20) as f64).collect();
    let gamma = uniform_vec(&mut rng, p, 0.1, 1.0);
    let spec = ObjectiveSpec::new(
        Arc::new(a),
        g.clone(),
        gamma.clone(),
        0.0,
        RelativeDifferencePrior::standard(2, 2),
        SubsetPartition::single(p),
    )
    .unwrap();
    let f = uniform_vec(&mut rng, q, 0.5, 2.0);
    let mut expect = 0.0;
    for r in 0..p {
        let af: f64 = (0..q).map(|c| dense[r * q + c] * f[c]).sum();
        expect += af - g[r] * (af + gamma[r]).ln();
    }
    let got = spec.value(&f).unwrap();
    assert!((got - expect).abs() <= 1e-12 * expect.abs());
}
