mod common;

use common::*;
use lqot_core::linsys::{kalman_decomposition, kalman_matrix, reachable_target, LinearQuadraticSystem};
use lqot_core::numerics::matrix_exponential;
use lqot_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn rejects_malformed_data() {
    let bad_w = LinearQuadraticSystem::from_rows(&[vec![0.0]], &[vec![1.0]], &[vec![-1.0]], &[vec![1.0]]);
    assert!(matches!(bad_w, Err(Error::NotPositiveSemidefinite(_))));
    let bad_u = LinearQuadraticSystem::from_rows(&[vec![0.0]], &[vec![1.0]], &[vec![0.0]], &[vec![0.0]]);
    assert!(matches!(bad_u, Err(Error::NotPositiveDefinite(_))));
    let shape = LinearQuadraticSystem::from_rows(&[vec![0.0, 1.0]], &[vec![1.0]], &[vec![0.0]], &[vec![1.0]]);
    assert!(matches!(shape, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn double_integrator_is_controllable() {
    let sys = LinearQuadraticSystem::from_rows(
        &[vec![0.0, 1.0], vec![0.0, 0.0]],
        &[vec![0.0], vec![1.0]],
        &[vec![0.0, 0.0], vec![0.0, 0.0]],
        &[vec![1.0]],
    )
    .unwrap();
    let report = sys.controllability();
    assert_eq!(report.rank, 2);
    assert!(report.is_controllable);
}

#[test]
fn zero_input_has_rank_zero() {
    let sys = LinearQuadraticSystem::new(
        DMatrix::identity(3, 3),
        DMatrix::zeros(3, 1),
        DMatrix::zeros(3, 3),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    assert_eq!(sys.controllability().rank, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rank_is_invariant_under_orthogonal_change_of_basis(seed in 0u64..10_000, d in 1usize..4, k in 0usize..3) {
        let mut r = rng(seed);
        let (sys, _) = random_block_system_or_controllable(&mut r, d, k);
        let q = orthogonal(&mut r, d + k);
        let a = &q * sys.a() * q.transpose();
        let b = &q * sys.b();
        prop_assert_eq!(kalman_decomposition(&a, &b).rank, kalman_decomposition(sys.a(), sys.b()).rank);
        prop_assert_eq!(kalman_decomposition(sys.a(), sys.b()).rank, d);
    }

    #[test]
    fn rank_grows_with_inputs(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (sys, _) = random_block_system(&mut r, 1, 2, 1);
        let extra = uniform_matrix(&mut r, 3, 1, 1.0);
        let mut b = DMatrix::zeros(3, 2);
        b.column_mut(0).copy_from(&sys.b().column(0));
        b.column_mut(1).copy_from(&extra.column(0));
        prop_assert!(kalman_decomposition(sys.a(), &b).rank >= 1);
        let km = kalman_matrix(sys.a(), &b);
        prop_assert_eq!(km.nrows(), 3);
        prop_assert_eq!(km.ncols(), 6);
    }

    #[test]
    fn decomposition_round_trips_and_is_block_triangular(seed in 0u64..10_000, d in 1usize..4, k in 1usize..3) {
        let mut r = rng(seed);
        let (sys, _) = random_block_system(&mut r, d, k, 1);
        let report = kalman_decomposition(sys.a(), sys.b());
        let p = &report.transform;
        prop_assert!((p * p.transpose() - DMatrix::identity(d + k, d + k)).amax() < 1e-12);
        let blocks = report.blocks.as_ref().unwrap();
        prop_assert!(blocks.residual <= 1e-10 * (1.0 + sys.a().amax()));
        let x = uniform_vector(&mut r, d + k, 2.0);
        let (x1, x2) = report.to_kalman(&x);
        prop_assert_eq!(x1.len(), d);
        prop_assert!((report.from_kalman(&x1, &x2) - &x).amax() < 1e-12);
        // Reassembled blocks reproduce P A P^T.
        let at = p * sys.a() * p.transpose();
        prop_assert!((at.view((0, 0), (d, d)) - &blocks.a1).amax() < 1e-12);
        prop_assert!((at.view((d, d), (k, k)) - &blocks.a2).amax() < 1e-12);
        prop_assert!((at.view((0, d), (d, k)) - &blocks.a3).amax() < 1e-12);
    }

    #[test]
    fn reachability_follows_the_controllable_subspace(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (sys, _) = random_block_system(&mut r, 2, 1, 1);
        let report = kalman_decomposition(sys.a(), sys.b());
        let x = uniform_vector(&mut r, 3, 1.0);
        let free = matrix_exponential(sys.a(), 1.0).unwrap() * &x;
        let inside = &free + &report.basis * uniform_vector(&mut r, 2, 1.0);
        prop_assert!(reachable_target(sys.a(), &report, &x, &inside).unwrap());
        let normal = {
            let q = report.transform.transpose();
            q.column(2).into_owned()
        };
        prop_assert!(!reachable_target(sys.a(), &report, &x, &(&inside + normal * 0.1)).unwrap());
    }
}

fn random_block_system_or_controllable(
    r: &mut rand_chacha::ChaCha8Rng,
    d: usize,
    k: usize,
) -> (LinearQuadraticSystem, DMatrix<f64>) {
    if k == 0 {
        let (sys, _) = random_controllable(r, d, 1, false);
        (sys, DMatrix::identity(d, d))
    } else {
        random_block_system(r, d, k, 1)
    }
}
