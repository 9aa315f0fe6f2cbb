mod common;

use common::*;
use proptest::prelude::*;
use recon_core::metrics::{nrmsd, vector_angle, Roi};
use recon_core::optimizer::{project_interior, Bounds, RelaxationSchedule};
use recon_core::preconditioner::{alpha_km, NesterovAlpha};
use recon_core::projector::{bit_reversal_order, build_system_matrix, partition_subsets};

fn positive_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_is_adjoint(seed in any::<u64>(), angles in 1usize..10) {
        let geom = small_geometry(6, angles);
        let a = build_system_matrix(&geom, None).unwrap();
        let mut rng = rng(seed);
        let x = uniform_vec(&mut rng, a.n_cols(), -1.0, 1.0);
        let y = uniform_vec(&mut rng, a.n_rows(), -1.0, 1.0);
        let lhs = dot(&a.forward(&x).unwrap(), &y);
        let rhs = dot(&x, &a.back(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn subsets_partition_the_rows(m in 1usize..25, per_subset in 1usize..5) {
        let angles = m * per_subset;
        let geom = small_geometry(4, angles);
        let part = partition_subsets(&geom, m).unwrap();
        let mut seen = vec![0usize; geom.n_bins()];
        for s in part.index_sets() {
            for &r in s {
                seen[r] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let mut order = part.access_order().to_vec();
        order.sort_unstable();
        prop_assert_eq!(order, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn bit_reversal_is_a_permutation(m in 1usize..100) {
        let mut order = bit_reversal_order(m);
        order.sort_unstable();
        prop_assert_eq!(order, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn nrmsd_is_invariant_to_joint_scaling(f in positive_vec(12), r in positive_vec(12), c in 0.01f64..100.0) {
        let roi = Roi::full(12);
        let base = nrmsd(&f, &r, &roi).unwrap();
        let fs: Vec<f64> = f.iter().map(|v| c * v).collect();
        let rs: Vec<f64> = r.iter().map(|v| c * v).collect();
        let scaled = nrmsd(&fs, &rs, &roi).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn angle_is_symmetric_and_scale_free(
        v1 in prop::collection::vec(-5.0f64..5.0, 8),
        v2 in prop::collection::vec(-5.0f64..5.0, 8),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(norm(&v1) > 1e-6 && norm(&v2) > 1e-6);
        let t = vector_angle(&v1, &v2).unwrap();
        prop_assert!((0.0..=std::f64::consts::PI).contains(&t));
        prop_assert_eq!(t, vector_angle(&v2, &v1).unwrap());
        let scaled: Vec<f64> = v1.iter().map(|x| c * x).collect();
        prop_assert!((t - vector_angle(&scaled, &v2).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn projection_lands_in_the_band(f in prop::collection::vec(-20.0f64..40.0, 16), upper in 1.0f64..30.0) {
        let b = Bounds { t: 1e-4, upper };
        let mut g = f.clone();
        project_interior(&mut g, &b).unwrap();
        prop_assert!(g.iter().all(|&v| v >= b.t && v <= upper - b.t));
        for (x, y) in f.iter().zip(&g) {
            if *x >= b.t && *x <= upper - b.t {
                prop_assert_eq!(x, y);
            }
        }
        let mut again = g.clone();
        project_interior(&mut again, &b).unwrap();
        prop_assert_eq!(again, g);
    }

    #[test]
    fn relaxation_strictly_decreases(lambda0 in 0.01f64..10.0, a in 1e-3f64..10.0, k in 0usize..100_000) {
        let s = RelaxationSchedule { lambda0, a };
        prop_assert!(s.at(k) > 0.0);
        prop_assert!(s.at(k + 1) < s.at(k));
    }

    #[test]
    fn momentum_sequences_stay_between_one_and_their_limit(
        m in 1usize..30, rho in 1.0f64..6.0, delta in 0.1f64..6.0, n in 1usize..300,
    ) {
        let mut nest = NesterovAlpha::new(m);
        for _ in 0..n {
            let a = nest.advance();
            prop_assert!((1.0..2.0).contains(&a));
        }
        let (k, i) = (n / m, n % m + 1);
        let a = alpha_km(k, i, m, rho, delta, delta);
        prop_assert!(a >= 1.0 - 1e-12 && a <= rho + 1e-12);
    }
}
