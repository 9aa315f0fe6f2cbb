#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon_core::objective::{ObjectiveSpec, RelativeDifferencePrior};
use recon_core::projector::{build_system_matrix, partition_subsets, ScannerGeometry, SubsetPartition, SystemMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// A small parallel-beam geometry on a rows×rows grid.
pub fn small_geometry(rows: usize, n_angles: usize) -> ScannerGeometry {
    ScannerGeometry {
        n_detectors: 4 * n_angles,
        detector_width: 4.0,
        fov: 300.0,
        n_angles,
        n_radial: 2 * rows,
        rows,
        cols: rows,
        pixel_size: 300.0 / rows as f64,
        rays_per_bin: 2,
    }
}

/// Φ on a real projector with synthetic counts; `m` subsets.
pub fn small_objective(rows: usize, n_angles: usize, m: usize, beta: f64, seed: u64) -> ObjectiveSpec {
    let geom = small_geometry(rows, n_angles);
    let a = build_system_matrix(&geom, None).unwrap();
    let mut rng = rng(seed);
    let truth = uniform_vec(&mut rng, geom.n_pixels(), 0.5, 2.0);
    let ybar = a.forward(&truth).unwrap();
    let counts: Vec<f64> = ybar.iter().map(|y| (y * rng.gen_range(0.7..1.3)).round()).collect();
    let background = vec![0.5; a.n_rows()];
    ObjectiveSpec::new(
        Arc::new(a),
        counts,
        background,
        beta,
        RelativeDifferencePrior::standard(rows, rows),
        partition_subsets(&geom, m).unwrap(),
    )
    .unwrap()
}

/// Dense random nonnegative matrix with every row and column nonzero.
pub fn dense_matrix(rng: &mut impl Rng, p: usize, q: usize) -> SystemMatrix {
    let mut dense = vec![0.0; p * q];
    for r in 0..p {
        for c in 0..q {
            if rng.gen_bool(0.6) || r % q == c {
                dense[r * q + c] = rng.gen_range(0.1..2.0);
            }
        }
    }
    for c in 0..q {
        dense[(c % p) * q + c] += 0.5;
    }
    SystemMatrix::from_dense(p, q, &dense).unwrap()
}

pub fn single_partition(p: usize) -> SubsetPartition {
    SubsetPartition::single(p)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fourth-order central difference of `phi` along `dir` at `f`.
pub fn directional_derivative(phi: impl Fn(&[f64]) -> f64, f: &[f64], dir: &[f64], h: f64) -> f64 {
    let at = |s: f64| {
        let g: Vec<f64> = f.iter().zip(dir).map(|(a, d)| a + s * d).collect();
        phi(&g)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}
