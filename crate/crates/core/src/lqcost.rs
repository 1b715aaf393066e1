//! Closed-form transport cost of a controllable LQ problem.
//!
//! The state/adjoint pair obeys `(x, p)' = M (x, p)` with the Hamiltonian
//! matrix `M = [[A, BU^{-1}B^T], [W, -A^T]]`. Writing `R(t) = e^{tM}` in
//! `n x n` blocks `R1..R4`, the optimal adjoint from `x` to `y` is
//! `p = R2(1)^{-1}(y - R1(1)x)` and the value function is the quadratic form
//!
//! ```text
//! c(x, y) = ½<x, Dx> - <x, Ey> + ½<y, Fy>,
//! D = R2^{-1} R1,  E = R2^{-1},  F = E^T Q2 E,
//! ```
//!
//! where `Q2 = ∫ R2^T W R2 + R4^T BU^{-1}B^T R4 dt` over `[0, 1]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsys::{controllability_subspace, LinearQuadraticSystem};
use crate::numerics::{
    asymmetry, condition_number, integrate, matrix_exponential, quarter, relative_residual, simpson_uniform,
    symmetric_eigen_range, symmetrize,
};

/// Largest admissible condition number of `R2(1)`.
pub const MAX_CONDITION_R2: f64 = 1e12;
/// Relative tolerance on the `C` and `Q1` relations.
pub const TOL_RELATION: f64 = 1e-9;
/// Relative tolerance on the symmetry of `D` and `F`.
pub const TOL_SYMMETRY: f64 = 1e-10;

/// `[[A, BU^{-1}B^T], [W, -A^T]]`.
pub fn hamiltonian_matrix(sys: &LinearQuadraticSystem) -> DMatrix<f64> {
    hamiltonian_from_blocks(sys.a(), &sys.input_weight(), sys.w())
}

pub(crate) fn hamiltonian_from_blocks(a: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(s);
    m.view_mut((n, 0), (n, n)).copy_from(w);
    m.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    m
}

/// The standard symplectic form `[[0, I], [-I, 0]]`.
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// Blocks of the fundamental solution `R(t) = e^{tM}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalBlocks {
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub r3: DMatrix<f64>,
    pub r4: DMatrix<f64>,
}

impl FundamentalBlocks {
    fn from_full(r: &DMatrix<f64>) -> Self {
        let [r1, r2, r3, r4] = quarter(r);
        FundamentalBlocks { r1, r2, r3, r4 }
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.r1.nrows();
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        r.view_mut((0, 0), (n, n)).copy_from(&self.r1);
        r.view_mut((0, n), (n, n)).copy_from(&self.r2);
        r.view_mut((n, 0), (n, n)).copy_from(&self.r3);
        r.view_mut((n, n), (n, n)).copy_from(&self.r4);
        r
    }
}

pub fn fundamental_solution(sys: &LinearQuadraticSystem, t: f64) -> Result<FundamentalBlocks> {
    Ok(FundamentalBlocks::from_full(&matrix_exponential(&hamiltonian_matrix(sys), t)?))
}

/// Residuals of the structural identities, kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// `C = -I + R1^T R2^{-T} Q2`.
    pub c_relation: f64,
    /// `Q1 = C R2^{-1} R1`.
    pub q1_relation: f64,
    pub d_asymmetry: f64,
    pub f_asymmetry: f64,
    pub d_min_eigenvalue: f64,
    pub f_min_eigenvalue: f64,
    pub cond_r2: f64,
}

/// The quadratic cost `½<x, Dx> - <x, Ey> + ½<y, Fy>` and the matrices it
/// was synthesized from.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    /// `E^{-1} = R2(1)`.
    pub e_inv: DMatrix<f64>,
    /// `R(1)`.
    pub r: FundamentalBlocks,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl CostModel {
    pub fn dim(&self) -> usize {
        self.d.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        eval_cost(self, x, y)
    }

    pub fn initial_adjoint(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        initial_adjoint(self, x, y)
    }

    /// `exp_x(p) = R1(1) x + R2(1) p`.
    pub fn endpoint(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        &self.r.r1 * x + &self.r.r2 * p
    }

    /// The value function expanded in the initial adjoint:
    /// `½<x, Q1 x> + <x, C p> + ½<p, Q2 p>`.
    pub fn cost_from_adjoint(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q1 * x)) + x.dot(&(&self.c * p)) + 0.5 * p.dot(&(&self.q2 * p))
    }
}

/// Synthesizes the cost matrices of a controllable system.
pub fn cost_matrices(sys: &LinearQuadraticSystem) -> Result<CostModel> {
    let report = controllability_subspace(sys.a(), sys.b());
    if !report.is_controllable {
        return Err(Error::NotControllable { rank: report.rank, n: sys.n() });
    }
    cost_matrices_unchecked(sys.a(), &sys.input_weight(), sys.w())
}

/// Same synthesis from raw blocks `(A, BU^{-1}B^T, W)`; controllability is
/// only detected through the conditioning of `R2(1)`.
// Negated comparisons below are deliberate: NaN must fail every check.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub(crate) fn cost_matrices_unchecked(a: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<CostModel> {
    let n = a.nrows();
    let ham = hamiltonian_from_blocks(a, s, w);
    let r = FundamentalBlocks::from_full(&matrix_exponential(&ham, 1.0)?);

    let cond_r2 = condition_number(&r.r2);
    if !(cond_r2 <= MAX_CONDITION_R2) {
        return Err(Error::IllConditioned { what: "R2(1)".into(), condition: cond_r2 });
    }

    let nn = n * n;
    let integrals = integrate(
        |t| {
            let rt = FundamentalBlocks::from_full(&matrix_exponential(&ham, t)?);
            let q1 = rt.r1.transpose() * w * &rt.r1 + rt.r3.transpose() * s * &rt.r3;
            let q2 = rt.r2.transpose() * w * &rt.r2 + rt.r4.transpose() * s * &rt.r4;
            let c = rt.r1.transpose() * w * &rt.r2 + rt.r3.transpose() * s * &rt.r4;
            let mut v = DVector::zeros(3 * nn);
            v.rows_mut(0, nn).copy_from_slice(q1.as_slice());
            v.rows_mut(nn, nn).copy_from_slice(q2.as_slice());
            v.rows_mut(2 * nn, nn).copy_from_slice(c.as_slice());
            Ok(v)
        },
        0.0,
        1.0,
    )?;
    let q1 = symmetrize(&DMatrix::from_column_slice(n, n, integrals.rows(0, nn).as_slice()));
    let q2 = symmetrize(&DMatrix::from_column_slice(n, n, integrals.rows(nn, nn).as_slice()));
    let c = DMatrix::from_column_slice(n, n, integrals.rows(2 * nn, nn).as_slice());

    let e =
        r.r2.clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::IllConditioned { what: "R2(1)".into(), condition: f64::INFINITY })?;
    let d_raw = &e * &r.r1;
    let f_raw = e.transpose() * &q2 * &e;

    let c_expected = -DMatrix::identity(n, n) + r.r1.transpose() * e.transpose() * &q2;
    let q1_expected = &c * &e * &r.r1;
    let mut diagnostics = Diagnostics {
        c_relation: relative_residual(&c, &c_expected),
        q1_relation: relative_residual(&q1, &q1_expected),
        d_asymmetry: asymmetry(&d_raw) / d_raw.norm().max(f64::MIN_POSITIVE),
        f_asymmetry: asymmetry(&f_raw) / f_raw.norm().max(f64::MIN_POSITIVE),
        cond_r2,
        ..Diagnostics::default()
    };
    for (name, value, tol) in [
        ("C = -I + R1^T R2^-T Q2", diagnostics.c_relation, TOL_RELATION),
        ("Q1 = C R2^-1 R1", diagnostics.q1_relation, TOL_RELATION),
        ("D = D^T", diagnostics.d_asymmetry, TOL_SYMMETRY),
        ("F = F^T", diagnostics.f_asymmetry, TOL_SYMMETRY),
    ] {
        if !(value <= tol) {
            return Err(Error::ConsistencyFailure { relation: name.into(), residual: value });
        }
    }

    let d = symmetrize(&d_raw);
    let f = symmetrize(&f_raw);
    diagnostics.d_min_eigenvalue = symmetric_eigen_range(&d).0;
    diagnostics.f_min_eigenvalue = symmetric_eigen_range(&f).0;
    for (name, value) in [("D > 0", diagnostics.d_min_eigenvalue), ("F > 0", diagnostics.f_min_eigenvalue)] {
        if !(value > 0.0) {
            return Err(Error::ConsistencyFailure { relation: name.into(), residual: value });
        }
    }

    Ok(CostModel { d, e, f, e_inv: r.r2.clone(), r, q1, q2, c, diagnostics })
}

/// `½<x, Dx> - <x, Ey> + ½<y, Fy>`, with roundoff-scale negatives clamped
/// to zero.
pub fn eval_cost(model: &CostModel, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let v = 0.5 * x.dot(&(&model.d * x)) - x.dot(&(&model.e * y)) + 0.5 * y.dot(&(&model.f * y));
    let floor = -1e-12 * (1.0 + x.norm_squared() + y.norm_squared());
    if v < 0.0 && v >= floor {
        0.0
    } else {
        v
    }
}

/// `p = R2(1)^{-1}(y - R1(1) x)`, refined once against the residual of
/// `R1 x + R2 p = y`.
pub fn initial_adjoint(model: &CostModel, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let rhs = y - &model.r.r1 * x;
    let mut p = &model.e * &rhs;
    let residual = &rhs - &model.r.r2 * &p;
    p += &model.e * residual;
    p
}

/// Sampled optimal state, adjoint and control on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub adjoints: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// Simpson quadrature of the Lagrangian along the samples.
    pub running_cost: f64,
}

impl OptimalTrajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least two samples")
    }
}

/// Optimal trajectory from `x` to `y` sampled at `intervals + 1` uniform
/// times.
pub fn optimal_trajectory(
    sys: &LinearQuadraticSystem,
    model: &CostModel,
    x: &DVector<f64>,
    y: &DVector<f64>,
    intervals: usize,
) -> Result<OptimalTrajectory> {
    let p0 = initial_adjoint(model, x, y);
    trajectory_from_adjoint(sys, x, &p0, intervals)
}

/// Integrates the Hamiltonian flow from `(x, p0)` exactly on a uniform grid
/// and reconstructs the control `u = U^{-1} B^T p`.
pub fn trajectory_from_adjoint(
    sys: &LinearQuadraticSystem,
    x: &DVector<f64>,
    p0: &DVector<f64>,
    intervals: usize,
) -> Result<OptimalTrajectory> {
    if intervals < 2 {
        return Err(Error::PreconditionViolated("trajectory needs at least 2 intervals".into()));
    }
    let n = sys.n();
    let h = 1.0 / intervals as f64;
    let step = matrix_exponential(&hamiltonian_matrix(sys), h)?;
    let gain = sys.u_inv() * sys.b().transpose();

    let mut state = DVector::zeros(2 * n);
    state.rows_mut(0, n).copy_from(x);
    state.rows_mut(n, n).copy_from(p0);

    let mut out = OptimalTrajectory {
        times: Vec::with_capacity(intervals + 1),
        states: Vec::with_capacity(intervals + 1),
        adjoints: Vec::with_capacity(intervals + 1),
        controls: Vec::with_capacity(intervals + 1),
        running_cost: 0.0,
    };
    let mut lagrangian = Vec::with_capacity(intervals + 1);
    for i in 0..=intervals {
        if i > 0 {
            state = &step * &state;
        }
        let xs = state.rows(0, n).into_owned();
        let ps = state.rows(n, n).into_owned();
        let us = &gain * &ps;
        lagrangian.push(sys.lagrangian(&xs, &us));
        out.times.push(if i == intervals { 1.0 } else { i as f64 * h });
        out.states.push(xs);
        out.adjoints.push(ps);
        out.controls.push(us);
    }
    out.running_cost = simpson_uniform(&lagrangian, h);
    Ok(out)
}

/// Cost for `W = 0` through the controllability Grammian
/// `G = ∫ e^{-τA} BU^{-1}B^T e^{-τA^T} dτ`:
/// `c(x, y) = ½<x - e^{-A}y, G^{-1}(x - e^{-A}y)>`.
pub fn grammian_cost(sys: &LinearQuadraticSystem, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if sys.w().amax() != 0.0 {
        return Err(Error::PreconditionViolated("Grammian cost requires W = 0".into()));
    }
    let g = controllability_grammian(sys)?;
    let z = x - matrix_exponential(sys.a(), -1.0)? * y;
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::IllConditioned { what: "controllability Grammian".into(), condition: f64::INFINITY })?;
    Ok(0.5 * z.dot(&chol.solve(&z)))
}

pub fn controllability_grammian(sys: &LinearQuadraticSystem) -> Result<DMatrix<f64>> {
    let report = controllability_subspace(sys.a(), sys.b());
    if !report.is_controllable {
        return Err(Error::NotControllable { rank: report.rank, n: sys.n() });
    }
    let n = sys.n();
    let s = sys.input_weight();
    let g = crate::numerics::integrate_matrix(
        |t| {
            let e = matrix_exponential(sys.a(), -t)?;
            Ok(&e * &s * e.transpose())
        },
        0.0,
        1.0,
        n,
        n,
    )?;
    Ok(symmetrize(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys(a: DMatrix<f64>, b: DMatrix<f64>, w: DMatrix<f64>, u: DMatrix<f64>) -> LinearQuadraticSystem {
        LinearQuadraticSystem::new(a, b, w, u).unwrap()
    }

    fn euclidean(n: usize) -> LinearQuadraticSystem {
        sys(DMatrix::zeros(n, n), DMatrix::identity(n, n), DMatrix::zeros(n, n), DMatrix::identity(n, n))
    }

    fn double_integrator() -> LinearQuadraticSystem {
        sys(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
        )
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn hamiltonian_of_scalar_integrator() {
        let m = hamiltonian_matrix(&euclidean(1));
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let s = sys(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        assert_eq!(hamiltonian_matrix(&s), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn fundamental_solution_starts_at_identity() {
        let r = fundamental_solution(&double_integrator(), 0.0).unwrap();
        assert_eq!(r.assemble(), DMatrix::identity(4, 4));
    }

    #[test]
    fn euclidean_fundamental_solution_is_shear() {
        let r = fundamental_solution(&euclidean(2), 0.7).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        assert!((&r.r1 - &id).amax() < 1e-15);
        assert!((&r.r2 - &id * 0.7).amax() < 1e-15);
        assert!(r.r3.amax() < 1e-15);
        assert!((&r.r4 - &id).amax() < 1e-15);
    }

    #[test]
    fn euclidean_cost_matrices_are_identity() {
        let model = cost_matrices(&euclidean(3)).unwrap();
        let id = DMatrix::<f64>::identity(3, 3);
        for m in [&model.d, &model.e, &model.f] {
            assert!((m - &id).amax() < 1e-12);
        }
        let c = eval_cost(&model, &v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]));
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_state_weight_gives_hyperbolic_cost() {
        let s = sys(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        let model = cost_matrices(&s).unwrap();
        assert!((model.d[(0, 0)] - 1.0f64.cosh() / 1.0f64.sinh()).abs() < 1e-12);
        assert!((model.e[(0, 0)] - 1.0 / 1.0f64.sinh()).abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_not_controllable() {
        let s = sys(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(2, 2), DMatrix::identity(1, 1));
        assert!(matches!(cost_matrices(&s), Err(Error::NotControllable { rank: 0, n: 2 })));
    }

    #[test]
    fn cost_vanishes_at_origin() {
        let model = cost_matrices(&double_integrator()).unwrap();
        assert_eq!(eval_cost(&model, &v(&[0.0, 0.0]), &v(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn double_integrator_cost_is_six() {
        let model = cost_matrices(&double_integrator()).unwrap();
        let c = eval_cost(&model, &v(&[0.0, 0.0]), &v(&[1.0, 0.0]));
        assert!((c - 6.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn euclidean_adjoint_is_displacement() {
        let model = cost_matrices(&euclidean(2)).unwrap();
        let (x, y) = (v(&[0.3, -1.0]), v(&[2.0, 0.5]));
        assert!((initial_adjoint(&model, &x, &y) - (&y - &x)).amax() < 1e-13);
        assert_eq!(initial_adjoint(&model, &v(&[0.0, 0.0]), &v(&[0.0, 0.0])), v(&[0.0, 0.0]));
    }

    #[test]
    fn double_integrator_control_is_linear() {
        let s = double_integrator();
        let model = cost_matrices(&s).unwrap();
        let traj = optimal_trajectory(&s, &model, &v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 2000).unwrap();
        for (t, u) in traj.times.iter().zip(&traj.controls) {
            assert!((u[0] - (6.0 - 12.0 * t)).abs() < 1e-6);
        }
        assert!((traj.running_cost - 6.0).abs() < 1e-8);
        assert!((traj.final_state() - v(&[1.0, 0.0])).norm() < 1e-10);
    }

    #[test]
    fn euclidean_trajectory_is_straight() {
        let s = euclidean(2);
        let model = cost_matrices(&s).unwrap();
        let (x, y) = (v(&[1.0, 2.0]), v(&[-1.0, 0.5]));
        let traj = optimal_trajectory(&s, &model, &x, &y, 10).unwrap();
        for (t, (xs, us)) in traj.times.iter().zip(traj.states.iter().zip(&traj.controls)) {
            assert!((xs - (&x + (&y - &x) * *t)).amax() < 1e-13);
            assert!((us - (&y - &x)).amax() < 1e-13);
        }
    }

    #[test]
    fn zero_trajectory() {
        let s = double_integrator();
        let model = cost_matrices(&s).unwrap();
        let traj = optimal_trajectory(&s, &model, &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), 4).unwrap();
        assert_eq!(traj.running_cost, 0.0);
        assert!(traj.states.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn grammian_matches_closed_forms() {
        let (x, y) = (v(&[0.2, 1.0]), v(&[1.5, -0.5]));
        let c = grammian_cost(&euclidean(2), &x, &y).unwrap();
        assert!((c - 0.5 * (&y - &x).norm_squared()).abs() < 1e-12);
        assert!(grammian_cost(&euclidean(2), &x, &x).unwrap().abs() < 1e-15);
        let c = grammian_cost(&double_integrator(), &v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 6.0).abs() < 1e-9);
    }

    #[test]
    fn grammian_requires_zero_state_weight() {
        let s = sys(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        assert!(matches!(grammian_cost(&s, &v(&[0.0]), &v(&[1.0])), Err(Error::PreconditionViolated(_))));
    }
}
