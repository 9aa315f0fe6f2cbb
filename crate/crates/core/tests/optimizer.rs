mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use recon_core::objective::{ObjectiveSpec, RelativeDifferencePrior};
use recon_core::optimizer::{AlgorithmConfig, Bounds, Observer, Reconstructor, Snapshot};
use recon_core::preconditioner::{base_precond_diag, compute_p, Variant};
use recon_core::projector::SubsetPartition;
use recon_core::Result;

struct BandCheck<'a> {
    bounds: Bounds,
    violations: usize,
    objective: Vec<f64>,
    spec: &'a ObjectiveSpec,
}

impl Observer for BandCheck<'_> {
    fn on_subiteration(&mut self, s: &Snapshot<'_>) -> Result<()> {
        let (t, u) = (self.bounds.t, self.bounds.upper);
        self.violations += s.f.iter().filter(|&&v| v < t || v > u - t).count();
        Ok(())
    }

    fn on_iteration(&mut self, s: &Snapshot<'_>) -> Result<()> {
        self.objective.push(self.spec.value(s.f)?);
        Ok(())
    }
}

#[test]
fn single_subset_bsrem_matches_preconditioned_gradient_descent() {
    let mut rng = rng(21);
    let (p, q) = (7, 3);
    let a = dense_matrix(&mut rng, p, q);
    let dense = a.to_dense();
    let g: Vec<f64> = (0..p).map(|_| rng.gen_range(1..30) as f64).collect();
    let gamma = vec![0.3; p];
    let spec = ObjectiveSpec::new(
        Arc::new(a),
        g.clone(),
        gamma.clone(),
        0.0,
        RelativeDifferencePrior::standard(1, 3),
        SubsetPartition::single(p),
    )
    .unwrap();
    let bounds = Bounds { t: 1e-4, upper: 100.0 };
    let cfg = AlgorithmConfig::bsrem(1, 0.5);
    let f0 = vec![1.0; q];
    let mut recon = Reconstructor::new(&spec, cfg, bounds, f0.clone()).unwrap();
    recon.run(5, &mut []).unwrap();

    let sens: Vec<f64> = (0..q).map(|c| (0..p).map(|r| dense[r * q + c]).sum()).collect();
    let mut f = f0;
    for k in 0..5 {
        let lambda = 1.0 / (0.5 * k as f64 + 1.0);
        let af: Vec<f64> = (0..p).map(|r| (0..q).map(|c| dense[r * q + c] * f[c]).sum()).collect();
        let grad: Vec<f64> = (0..q)
            .map(|c| (0..p).map(|r| dense[r * q + c] * (1.0 - g[r] / (af[r] + gamma[r]))).sum())
            .collect();
        for c in 0..q {
            let s = if f[c] < 50.0 { f[c] / sens[c] } else { (100.0 - f[c]) / sens[c] };
            f[c] = (f[c] - lambda * s * grad[c]).clamp(1e-4, 100.0 - 1e-4);
        }
    }
    for (got, want) in recon.image().iter().zip(&f) {
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
}

fn variants(m: usize) -> Vec<AlgorithmConfig> {
    let mut p1 = AlgorithmConfig::bsrem(m, 0.3);
    p1.variant = Variant::P1;
    p1.nu1 = Some(1.2);
    p1.nu2 = Some(2.0);
    let mut p2 = p1.clone();
    p2.variant = Variant::P2;
    p2.rho = Some(2.0);
    p2.delta1 = Some(3.0);
    let mut m1 = AlgorithmConfig::bsrem(m, 0.3);
    m1.variant = Variant::M1;
    let mut m2 = m1.clone();
    m2.variant = Variant::M2;
    m2.rho = Some(2.0);
    m2.delta1 = Some(1.0);
    vec![AlgorithmConfig::bsrem(m, 0.1), p1, p2, m1, m2]
}

#[test]
fn every_variant_stays_in_the_band_and_descends() {
    let spec = small_objective(8, 12, 4, 0.5, 31);
    let bounds = Bounds { t: 1e-4, upper: 50.0 };
    for cfg in variants(4) {
        let label = cfg.label();
        let mut check = BandCheck {
            bounds,
            violations: 0,
            objective: Vec::new(),
            spec: &spec,
        };
        let mut recon = Reconstructor::new(&spec, cfg, bounds, vec![1.0; spec.n_pixels()]).unwrap();
        recon.run(40, &mut [&mut check]).unwrap();
        assert_eq!(check.violations, 0, "{label}");
        let obj = &check.objective;
        for k in 5..obj.len() - 5 {
            assert!(obj[k + 5] <= obj[k], "{label}: Φ rose from k={k} to k={}", k + 5);
        }
    }
}

#[test]
fn long_runs_reach_the_same_minimizer() {
    let spec = small_objective(8, 12, 1, 0.5, 32);
    let bounds = Bounds { t: 1e-4, upper: 50.0 };
    let f0 = vec![1.0; spec.n_pixels()];
    // One subset and a slowly decaying relaxation: no ordered-subsets limit
    // cycle, so every variant should land on the exact minimizer.
    let mut images = Vec::new();
    for mut cfg in variants(1) {
        cfg.a = 1e-3;
        let mut recon = Reconstructor::new(&spec, cfg, bounds, f0.clone()).unwrap();
        recon.run(3000, &mut []).unwrap();
        images.push(recon.into_image());
    }
    for img in &images[1..] {
        let diff: Vec<f64> = img.iter().zip(&images[0]).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&images[0]);
        assert!(rel < 1e-4, "relative distance {rel}");
    }
    // Stationarity of the long run: the scaled gradient vanishes.
    let f = &images[0];
    let p = compute_p(spec.matrix(), 1);
    let s = base_precond_diag(f, &p, bounds.upper).unwrap();
    let g = spec.gradient(f).unwrap();
    let g0 = spec.gradient(&f0).unwrap();
    let scaled = s.iter().zip(&g).map(|(a, b)| (a * b).abs()).fold(0.0, f64::max);
    let initial = g0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(scaled < 1e-6 * initial, "‖S∇Φ‖∞ = {scaled}, ‖∇Φ(f0)‖∞ = {initial}");
}

#[test]
fn runs_are_deterministic() {
    let spec = small_objective(8, 12, 4, 0.5, 33);
    let bounds = Bounds { t: 1e-4, upper: 50.0 };
    for cfg in variants(4) {
        let run = || {
            let mut r = Reconstructor::new(&spec, cfg.clone(), bounds, vec![1.0; spec.n_pixels()]).unwrap();
            r.run(7, &mut []).unwrap();
            r.into_image()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
