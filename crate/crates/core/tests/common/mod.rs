#![allow(dead_code)]

use lqot_core::linsys::LinearQuadraticSystem;
use lqot_core::lqcost::{cost_matrices, hamiltonian_matrix, CostModel};
use lqot_core::numerics::spectral_norm;
use lqot_core::transport::{make_measure, DiscreteMeasure};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let l = uniform_matrix(rng, n, n, 1.0);
    &l * l.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    uniform_matrix(rng, n, n, 1.0).qr().q()
}

/// Random system with `|M|_2 <= 10`, optionally with `W = 0`.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, zero_w: bool) -> LinearQuadraticSystem {
    loop {
        let a = uniform_matrix(rng, n, n, 1.5);
        let b = uniform_matrix(rng, n, m, 1.0);
        let w = if zero_w { DMatrix::zeros(n, n) } else { spd(rng, n, 0.0) };
        let u = spd(rng, m, 0.5);
        let sys = LinearQuadraticSystem::new(a, b, w, u).unwrap();
        if spectral_norm(&hamiltonian_matrix(&sys)) <= 10.0 {
            return sys;
        }
    }
}

/// Random controllable system whose cost synthesis succeeds with
/// `cond(R2(1)) <= 1e8`, so that relative tolerances are meaningful.
pub fn random_controllable(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    zero_w: bool,
) -> (LinearQuadraticSystem, CostModel) {
    loop {
        let sys = random_system(rng, n, m, zero_w);
        if !sys.is_controllable() {
            continue;
        }
        if let Ok(model) = cost_matrices(&sys) {
            if model.diagnostics.cond_r2 <= 1e8 {
                return (sys, model);
            }
        }
    }
}

/// Non-controllable system assembled in Kalman form and rotated by a random
/// orthogonal matrix. Returns the system and the rotation `Q` with
/// `A = Q^T [[A1, A3], [0, A2]] Q`.
pub fn random_block_system(
    rng: &mut ChaCha8Rng,
    d: usize,
    k: usize,
    m: usize,
) -> (LinearQuadraticSystem, DMatrix<f64>) {
    let n = d + k;
    loop {
        let mut at = DMatrix::zeros(n, n);
        at.view_mut((0, 0), (d, d)).copy_from(&uniform_matrix(rng, d, d, 1.0));
        at.view_mut((0, d), (d, k)).copy_from(&uniform_matrix(rng, d, k, 1.0));
        at.view_mut((d, d), (k, k)).copy_from(&uniform_matrix(rng, k, k, 0.7));
        let mut bt = DMatrix::zeros(n, m);
        bt.view_mut((0, 0), (d, m)).copy_from(&uniform_matrix(rng, d, m, 1.0));
        let q = orthogonal(rng, n);
        let a = q.transpose() * at * &q;
        let b = q.transpose() * bt;
        let w = spd(rng, n, 0.1);
        let sys = LinearQuadraticSystem::new(a, b, w, spd(rng, m, 0.5)).unwrap();
        let report = sys.controllability();
        if report.rank == d && report.singular_values[d - 1] > 1e-3 * report.singular_values[0] {
            return (sys, q);
        }
    }
}

pub fn random_measure(rng: &mut ChaCha8Rng, count: usize, dim: usize, uniform: bool) -> DiscreteMeasure {
    let points = (0..count).map(|_| uniform_vector(rng, dim, 1.0)).collect();
    let weights = (0..count).map(|_| if uniform { 1.0 } else { rng.random_range(0.1..1.0) }).collect();
    make_measure(points, weights).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
