//! Transport for systems that are not controllable.
//!
//! In Kalman coordinates `(x1, x2)` the uncontrolled part evolves freely,
//! `x2(t) = e^{tA2} x2`, so a target is reachable only on the fiber
//! `y2 = e^{A2} x2`. On a fiber the controllable part sees an affine
//! perturbation of a `d`-dimensional linear-quadratic problem whose cost is a
//! quadratic form plus affine and constant corrections.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsys::{kalman_decomposition, ControllabilityReport, LinearQuadraticSystem};
use crate::lqcost::{
    cost_matrices_unchecked, hamiltonian_from_blocks, trajectory_from_adjoint, CostModel, OptimalTrajectory,
};
use crate::numerics::{block, integrate, matrix_exponential, relative_residual, symmetrize};
use crate::transport::{solve_weights, Coupling, DiscreteMeasure, DualPotentials, SolverOptions, TransportPlan};

/// Tolerance of the relation `v = R1^T R2^{-T} w`.
pub const TOL_AFFINE_RELATION: f64 = 1e-8;
/// Default mass tolerance of [`compatibility_check`].
pub const TOL_MASS: f64 = 1e-9;

/// Default fiber radius `1e-8 (1 + max|x2|)`.
pub fn default_fiber_eps(max_label_norm: f64) -> f64 {
    1e-8 * (1.0 + max_label_norm)
}

/// Blocks of a non-controllable system in Kalman coordinates plus the
/// reduced cost model of the controllable part.
#[derive(Debug, Clone)]
pub struct FiberDynamics {
    pub report: ControllabilityReport,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub a3: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    /// `B1 U^{-1} B1^T`.
    pub s1: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    /// `e^{A2}`.
    pub exp_a2: DMatrix<f64>,
    /// Cost model of `(A1, B1, W1, U)`.
    pub reduced: CostModel,
    triangular: DMatrix<f64>,
    hamiltonian: DMatrix<f64>,
}

pub fn fiber_dynamics(sys: &LinearQuadraticSystem, report: &ControllabilityReport) -> Result<FiberDynamics> {
    let n = sys.n();
    let d = report.rank;
    if d == 0 {
        return Err(Error::DegenerateFiber);
    }
    if d == n {
        return Err(Error::PreconditionViolated("system is controllable; no fibers".into()));
    }
    let blocks =
        report.blocks.as_ref().ok_or_else(|| Error::PreconditionViolated("report lacks Kalman blocks".into()))?;
    let p = &report.transform;
    let wt = symmetrize(&(p * sys.w() * p.transpose()));
    let w1 = block(&wt, 0, 0, d, d);
    let w3 = block(&wt, 0, d, d, n - d);
    let w2 = block(&wt, d, d, n - d, n - d);
    let s1 = &blocks.b1 * sys.u_inv() * blocks.b1.transpose();
    let reduced = cost_matrices_unchecked(&blocks.a1, &s1, &w1)?;

    let mut triangular = DMatrix::zeros(n, n);
    triangular.view_mut((0, 0), (d, d)).copy_from(&blocks.a1);
    triangular.view_mut((0, d), (d, n - d)).copy_from(&blocks.a3);
    triangular.view_mut((d, d), (n - d, n - d)).copy_from(&blocks.a2);
    let hamiltonian = hamiltonian_from_blocks(&blocks.a1, &s1, &w1);

    Ok(FiberDynamics {
        report: report.clone(),
        a1: blocks.a1.clone(),
        a2: blocks.a2.clone(),
        a3: blocks.a3.clone(),
        b1: blocks.b1.clone(),
        s1,
        w1,
        w2,
        w3,
        exp_a2: matrix_exponential(&blocks.a2, 1.0)?,
        reduced,
        triangular,
        hamiltonian,
    })
}

impl FiberDynamics {
    pub fn d(&self) -> usize {
        self.a1.nrows()
    }

    pub fn fiber_dim(&self) -> usize {
        self.a2.nrows()
    }

    /// `W` in Kalman coordinates, reassembled from its blocks.
    pub fn w_kalman(&self) -> DMatrix<f64> {
        let (d, k) = (self.d(), self.fiber_dim());
        let mut w = DMatrix::zeros(d + k, d + k);
        w.view_mut((0, 0), (d, d)).copy_from(&self.w1);
        w.view_mut((0, d), (d, k)).copy_from(&self.w3);
        w.view_mut((d, 0), (k, d)).copy_from(&self.w3.transpose());
        w.view_mut((d, d), (k, k)).copy_from(&self.w2);
        w
    }

    /// `(G(t), e^{tA2})` with `G(t) = ∫_0^t e^{(t-s)A1} A3 e^{sA2} ds`, read off
    /// the exponential of the block-triangular drift.
    pub fn flow(&self, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (d, k) = (self.d(), self.fiber_dim());
        let e = matrix_exponential(&self.triangular, t)?;
        Ok((block(&e, 0, d, d, k), block(&e, d, d, k, k)))
    }

    pub fn g(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.flow(t)?.0)
    }

    /// `(G(t) x2, e^{tA2} x2)`.
    fn drift_of_label(&self, t: f64, x2: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (g, h) = self.flow(t)?;
        Ok((g * x2, h * x2))
    }

    /// `X(t; x2) = W1 G(t) x2 + W3 e^{tA2} x2`.
    pub fn forcing(&self, t: f64, x2: &DVector<f64>) -> Result<DVector<f64>> {
        let (g, h) = self.drift_of_label(t, x2)?;
        Ok(&self.w1 * g + &self.w3 * h)
    }

    /// `(z̄(t), p̄(t))` stacked, by quadrature of the variation-of-constants
    /// formula.
    fn forced_state(&self, t: f64, x2: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.d();
        if t == 0.0 {
            return Ok(DVector::zeros(2 * d));
        }
        integrate(
            |s| {
                let mut rhs = DVector::zeros(2 * d);
                rhs.rows_mut(d, d).copy_from(&self.forcing(s, x2)?);
                Ok(matrix_exponential(&self.hamiltonian, t - s)? * rhs)
            },
            0.0,
            t,
        )
    }
}

/// Particular solution of the forced Hamiltonian system on a fiber with zero
/// initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedSolution {
    pub times: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
}

pub fn forced_hamiltonian_solution(
    dynamics: &FiberDynamics,
    x2: &DVector<f64>,
    times: &[f64],
) -> Result<ForcedSolution> {
    let d = dynamics.d();
    let mut out = ForcedSolution { times: times.to_vec(), z: Vec::new(), p: Vec::new() };
    for &t in times {
        let s = dynamics.forced_state(t, x2)?;
        out.z.push(s.rows(0, d).into_owned());
        out.p.push(s.rows(d, d).into_owned());
    }
    Ok(out)
}

/// Cost data of a single fiber `x2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberCostModel {
    pub x2: DVector<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    /// `z̄(1)`.
    pub z_bar1: DVector<f64>,
    pub v: DVector<f64>,
    pub w: DVector<f64>,
    pub k: f64,
    /// `∫_0^1 l(t; x2) dt`, the cost of the uncontrolled drift.
    pub l_int: f64,
    /// `G(1) x2`.
    pub g1x2: DVector<f64>,
    /// `e^{A2} x2`, the target fiber.
    pub image_label: DVector<f64>,
    /// Residual of `v = R1^T R2^{-T} w`.
    pub relation_residual: f64,
}

pub fn fiber_cost_model(dynamics: &FiberDynamics, x2: &DVector<f64>) -> Result<FiberCostModel> {
    let d = dynamics.d();
    let model = &dynamics.reduced;
    let w_kalman = dynamics.w_kalman();
    let ham = &dynamics.hamiltonian;

    // One pass computes v (d), w (d), k and the drift cost.
    let data = integrate(
        |t| {
            let r = matrix_exponential(ham, t)?;
            let (r1, r2, r3, r4) =
                (block(&r, 0, 0, d, d), block(&r, 0, d, d, d), block(&r, d, 0, d, d), block(&r, d, d, d, d));
            let (g, h) = dynamics.drift_of_label(t, x2)?;
            let forcing = &dynamics.w1 * &g + &dynamics.w3 * &h;
            let s = dynamics.forced_state(t, x2)?;
            let zb = s.rows(0, d).into_owned();
            let pb = s.rows(d, d).into_owned();
            let wz = &dynamics.w1 * &zb + &forcing;
            let sp = &dynamics.s1 * &pb;
            let v = r1.transpose() * &wz + r3.transpose() * &sp;
            let w = r2.transpose() * &wz + r4.transpose() * &sp;
            let k = 0.5 * zb.dot(&(&dynamics.w1 * &zb)) + 0.5 * pb.dot(&sp) + zb.dot(&forcing);
            let xi = DVector::from_iterator(g.len() + h.len(), g.iter().chain(h.iter()).copied());
            let l = 0.5 * xi.dot(&(&w_kalman * &xi));
            let mut out = DVector::zeros(2 * d + 2);
            out.rows_mut(0, d).copy_from(&v);
            out.rows_mut(d, d).copy_from(&w);
            out[2 * d] = k;
            out[2 * d + 1] = l;
            Ok(out)
        },
        0.0,
        1.0,
    )?;
    let v = data.rows(0, d).into_owned();
    let w = data.rows(d, d).into_owned();
    let z_bar1 = dynamics.forced_state(1.0, x2)?.rows(0, d).into_owned();
    let (g1, exp_a2) = dynamics.flow(1.0)?;

    let predicted = model.r.r1.transpose() * model.e.transpose() * &w;
    let relation_residual = relative_residual(
        &DMatrix::from_column_slice(d, 1, v.as_slice()),
        &DMatrix::from_column_slice(d, 1, predicted.as_slice()),
    );
    if relation_residual > TOL_AFFINE_RELATION {
        return Err(Error::ConsistencyFailure { relation: "v = R1^T R2^-T w".into(), residual: relation_residual });
    }
    Ok(FiberCostModel {
        x2: x2.clone(),
        d: model.d.clone(),
        e: model.e.clone(),
        f: model.f.clone(),
        r1: model.r.r1.clone(),
        z_bar1,
        v,
        w,
        k: data[2 * d],
        l_int: data[2 * d + 1],
        g1x2: g1 * x2,
        image_label: exp_a2 * x2,
        relation_residual,
    })
}

/// Fiber cost before the drift term, as a function of the shifted target
/// `ŷ = y1 - G(1) x2`.
pub fn reduced_fiber_cost(fcm: &FiberCostModel, x1: &DVector<f64>, y_hat: &DVector<f64>) -> f64 {
    let q = y_hat - &fcm.z_bar1;
    let eq = &fcm.e * &q;
    0.5 * x1.dot(&(&fcm.d * x1)) - x1.dot(&eq) + 0.5 * q.dot(&(&fcm.f * &q)) + eq.dot(&fcm.w) + fcm.k
}

/// Cost from `(x1, x2)` to `(y1, e^{A2} x2)`.
pub fn eval_fiber_cost(fcm: &FiberCostModel, x1: &DVector<f64>, y1: &DVector<f64>) -> f64 {
    let value = reduced_fiber_cost(fcm, x1, &(y1 - &fcm.g1x2)) + fcm.l_int;
    let floor = 1e-12 * (1.0 + x1.norm_squared() + y1.norm_squared() + fcm.x2.norm_squared());
    if value < 0.0 && value >= -floor {
        0.0
    } else {
        value
    }
}

/// Initial adjoint of the controllable block.
pub fn fiber_initial_adjoint(fcm: &FiberCostModel, x1: &DVector<f64>, y1: &DVector<f64>) -> DVector<f64> {
    let q = y1 - &fcm.g1x2 - &fcm.z_bar1;
    &fcm.e * (q - &fcm.r1 * x1)
}

/// Full-state adjoint `P^T (p1, 0)`; the uncontrolled component of the
/// adjoint does not influence the state.
pub fn fiber_full_adjoint(
    dynamics: &FiberDynamics,
    fcm: &FiberCostModel,
    x1: &DVector<f64>,
    y1: &DVector<f64>,
) -> DVector<f64> {
    let p1 = fiber_initial_adjoint(fcm, x1, y1);
    dynamics.report.from_kalman(&p1, &DVector::zeros(dynamics.fiber_dim()))
}

/// Optimal trajectory of the original system between `x` and a target on
/// its fiber, integrated in the original coordinates.
pub fn fiber_trajectory(
    sys: &LinearQuadraticSystem,
    dynamics: &FiberDynamics,
    x: &DVector<f64>,
    y: &DVector<f64>,
    intervals: usize,
) -> Result<OptimalTrajectory> {
    let (x1, x2) = dynamics.report.to_kalman(x);
    let (y1, _) = dynamics.report.to_kalman(y);
    let fcm = fiber_cost_model(dynamics, &x2)?;
    let p0 = fiber_full_adjoint(dynamics, &fcm, &x1, &y1);
    trajectory_from_adjoint(sys, x, &p0, intervals)
}

/// `½ ∫_0^1 <e^{tA} x, W e^{tA} x> dt`: the cost of the free motion.
pub fn forced_cost(sys: &LinearQuadraticSystem, x: &DVector<f64>) -> Result<f64> {
    let v = integrate(
        |t| {
            let xt = matrix_exponential(sys.a(), t)? * x;
            Ok(DVector::from_element(1, 0.5 * xt.dot(&(sys.w() * &xt))))
        },
        0.0,
        1.0,
    )?;
    Ok(v[0])
}

/// A group of atoms sharing a fiber label.
#[derive(Debug, Clone, PartialEq)]
pub struct Fiber {
    /// Lexicographically smallest label in the cluster.
    pub label: DVector<f64>,
    /// Total mass of the fiber in the original measure.
    pub weight: f64,
    /// Indices of the atoms in the original measure.
    pub atoms: Vec<usize>,
    /// Controllable coordinates `x1` of those atoms.
    pub points: Vec<DVector<f64>>,
    /// Conditional weights, summing to 1.
    pub weights: Vec<f64>,
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Single-linkage clusters of `labels` at radius `eps`, each a sorted list of
/// indices, ordered by their lexicographically smallest label.
fn cluster_labels(labels: &[DVector<f64>], eps: f64) -> Vec<Vec<usize>> {
    let n = labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    // Sweep along the first coordinate; only a window of width eps can link.
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| labels[i].get(0).copied().unwrap_or(0.0);
    order.sort_by(|&i, &j| key(i).total_cmp(&key(j)).then(i.cmp(&j)));
    for (k, &i) in order.iter().enumerate() {
        for &j in order[..k].iter().rev() {
            if key(i) - key(j) > eps {
                break;
            }
            if (&labels[i] - &labels[j]).norm() <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    let first =
        |g: &Vec<usize>| g.iter().copied().min_by(|&a, &b| lex_cmp(&labels[a], &labels[b]).then(a.cmp(&b))).unwrap();
    out.sort_by(|a, b| lex_cmp(&labels[first(a)], &labels[first(b)]));
    out
}

/// Splits a measure into fibers of equal `x2` (up to `eps`).
pub fn disintegrate(measure: &DiscreteMeasure, report: &ControllabilityReport, eps: f64) -> Vec<Fiber> {
    let split: Vec<(DVector<f64>, DVector<f64>)> = measure.points().iter().map(|x| report.to_kalman(x)).collect();
    let labels: Vec<DVector<f64>> = split.iter().map(|(_, x2)| x2.clone()).collect();
    cluster_labels(&labels, eps)
        .into_iter()
        .map(|atoms| {
            let weight: f64 = atoms.iter().map(|&i| measure.weights()[i]).sum();
            let label =
                atoms.iter().map(|&i| &labels[i]).min_by(|a, b| lex_cmp(a, b)).expect("cluster is non-empty").clone();
            Fiber {
                label,
                weight,
                points: atoms.iter().map(|&i| split[i].0.clone()).collect(),
                weights: atoms.iter().map(|&i| measure.weights()[i] / weight).collect(),
                atoms,
            }
        })
        .collect()
}

/// Source and target atoms that share a target fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberGroup {
    /// `x2` of the lexicographically first source atom (empty group: none).
    pub source_label: Option<DVector<f64>>,
    /// Smallest label among pushed source and target labels.
    pub target_label: DVector<f64>,
    pub source_atoms: Vec<usize>,
    pub target_atoms: Vec<usize>,
    pub source_mass: f64,
    pub target_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub compatible: bool,
    /// Largest per-fiber mass mismatch.
    pub discrepancy: f64,
    pub groups: Vec<FiberGroup>,
}

/// Compares `(e^{A2} x2)♯μ0` with `(y2)♯μ1`, fiber by fiber. Measures are
/// given in the original coordinates.
pub fn compatibility_check(
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    report: &ControllabilityReport,
    exp_a2: &DMatrix<f64>,
    tol: f64,
    eps: f64,
) -> CompatibilityReport {
    let src: Vec<DVector<f64>> = mu0.points().iter().map(|x| report.fiber_projection(x)).collect();
    let mut labels: Vec<DVector<f64>> = src.iter().map(|x2| exp_a2 * x2).collect();
    labels.extend(mu1.points().iter().map(|y| report.fiber_projection(y)));
    let n0 = mu0.len();
    let mut groups = Vec::new();
    let mut discrepancy: f64 = 0.0;
    for members in cluster_labels(&labels, eps) {
        let source_atoms: Vec<usize> = members.iter().copied().filter(|&i| i < n0).collect();
        let target_atoms: Vec<usize> = members.iter().copied().filter(|&i| i >= n0).map(|i| i - n0).collect();
        let source_mass: f64 = source_atoms.iter().map(|&i| mu0.weights()[i]).sum();
        let target_mass: f64 = target_atoms.iter().map(|&j| mu1.weights()[j]).sum();
        discrepancy = discrepancy.max((source_mass - target_mass).abs());
        let source_label = source_atoms.iter().map(|&i| &src[i]).min_by(|a, b| lex_cmp(a, b)).cloned();
        let target_label = members.iter().map(|&i| &labels[i]).min_by(|a, b| lex_cmp(a, b)).unwrap().clone();
        groups.push(FiberGroup { source_label, target_label, source_atoms, target_atoms, source_mass, target_mass });
    }
    CompatibilityReport { compatible: discrepancy <= tol, discrepancy, groups }
}

/// Solution restricted to one fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberSolution {
    pub source_label: DVector<f64>,
    pub target_label: DVector<f64>,
    pub weight: f64,
    /// Optimal cost of the normalized fiber problem.
    pub cost: f64,
    pub source_atoms: Vec<usize>,
    pub target_atoms: Vec<usize>,
    /// Plan in fiber-local indices.
    pub plan: TransportPlan,
    pub duals: DualPotentials,
    /// Fiber cost matrix (fiber-local indices).
    pub cost_matrix: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoncontrollableSolution {
    pub plan: TransportPlan,
    pub fibers: Vec<FiberSolution>,
    pub compatibility: CompatibilityReport,
    pub report: ControllabilityReport,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberOptions {
    /// Fiber radius; `None` uses [`default_fiber_eps`].
    pub eps: Option<f64>,
    pub mass_tol: f64,
    pub solver: SolverOptions,
}

impl Default for FiberOptions {
    fn default() -> Self {
        FiberOptions { eps: None, mass_tol: TOL_MASS, solver: SolverOptions::default() }
    }
}

/// Pair costs of a non-controllable system, `None` off the fiber.
#[derive(Debug, Clone)]
pub struct FiberCost {
    pub report: ControllabilityReport,
    /// `None` when `d = 0`.
    pub dynamics: Option<FiberDynamics>,
    pub exp_a2: DMatrix<f64>,
    sys: LinearQuadraticSystem,
}

impl FiberCost {
    pub fn new(sys: &LinearQuadraticSystem) -> Result<Self> {
        let report = kalman_decomposition(sys.a(), sys.b());
        if report.is_controllable {
            return Err(Error::PreconditionViolated("system is controllable; no fibers".into()));
        }
        let dynamics = if report.rank == 0 { None } else { Some(fiber_dynamics(sys, &report)?) };
        let a2 = &report.blocks.as_ref().expect("blocks exist for d < n").a2;
        Ok(FiberCost { exp_a2: matrix_exponential(a2, 1.0)?, report, dynamics, sys: sys.clone() })
    }

    /// `|y2 - e^{A2} x2|`.
    pub fn fiber_gap(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let x2 = self.report.fiber_projection(x);
        let y2 = self.report.fiber_projection(y);
        (y2 - &self.exp_a2 * x2).norm()
    }

    /// Cost and full initial adjoint of a pair, `None` when `y` is off the
    /// fiber of `x` by more than `eps`.
    pub fn pair(&self, x: &DVector<f64>, y: &DVector<f64>, eps: f64) -> Result<Option<(f64, DVector<f64>)>> {
        if self.fiber_gap(x, y) > eps {
            return Ok(None);
        }
        match &self.dynamics {
            None => Ok(Some((forced_cost(&self.sys, x)?, DVector::zeros(x.len())))),
            Some(dynamics) => {
                let (x1, x2) = self.report.to_kalman(x);
                let (y1, _) = self.report.to_kalman(y);
                let fcm = fiber_cost_model(dynamics, &x2)?;
                let p0 = fiber_full_adjoint(dynamics, &fcm, &x1, &y1);
                Ok(Some((eval_fiber_cost(&fcm, &x1, &y1), p0)))
            }
        }
    }
}

fn max_label_norm(report: &ControllabilityReport, measures: &[&DiscreteMeasure]) -> f64 {
    measures.iter().flat_map(|m| m.points().iter()).map(|x| report.fiber_projection(x).norm()).fold(0.0, f64::max)
}

/// Optimal plan for a non-controllable system: fibers are matched through
/// the free dynamics and solved independently.
pub fn solve_noncontrollable(
    sys: &LinearQuadraticSystem,
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    options: FiberOptions,
) -> Result<NoncontrollableSolution> {
    let model = FiberCost::new(sys)?;
    let report = &model.report;
    let eps = options.eps.unwrap_or_else(|| default_fiber_eps(max_label_norm(report, &[mu0, mu1])));
    let compatibility = compatibility_check(mu0, mu1, report, &model.exp_a2, options.mass_tol, eps);
    if !compatibility.compatible {
        return Err(Error::IncompatibleMarginals { discrepancy: compatibility.discrepancy });
    }

    let split0: Vec<(DVector<f64>, DVector<f64>)> = mu0.points().iter().map(|x| report.to_kalman(x)).collect();
    let split1: Vec<(DVector<f64>, DVector<f64>)> = mu1.points().iter().map(|y| report.to_kalman(y)).collect();
    let mut fibers = Vec::new();
    let mut couplings = Vec::new();
    let mut global_cost = std::collections::BTreeMap::new();
    for group in &compatibility.groups {
        let source_label = group.source_label.clone().expect("compatible groups have sources");
        let a: Vec<f64> = group.source_atoms.iter().map(|&i| mu0.weights()[i] / group.source_mass).collect();
        let b: Vec<f64> = group.target_atoms.iter().map(|&j| mu1.weights()[j] / group.target_mass).collect();
        let mut cost = DMatrix::zeros(a.len(), b.len());
        match &model.dynamics {
            None => {
                for (r, &i) in group.source_atoms.iter().enumerate() {
                    let c = forced_cost(sys, &mu0.points()[i])?;
                    cost.row_mut(r).fill(c);
                }
            }
            Some(dynamics) => {
                let fcm = fiber_cost_model(dynamics, &source_label)?;
                for (r, &i) in group.source_atoms.iter().enumerate() {
                    for (c, &j) in group.target_atoms.iter().enumerate() {
                        cost[(r, c)] = eval_fiber_cost(&fcm, &split0[i].0, &split1[j].0);
                    }
                }
            }
        }
        let (plan, duals) = solve_weights(&cost, &a, &b, options.solver)?;
        for c in &plan.couplings {
            let (i, j) = (group.source_atoms[c.source], group.target_atoms[c.target]);
            couplings.push(Coupling { source: i, target: j, mass: c.mass * group.source_mass });
            global_cost.insert((i, j), cost[(c.source, c.target)]);
        }
        fibers.push(FiberSolution {
            target_label: model.exp_a2.clone() * &source_label,
            source_label,
            weight: group.source_mass,
            cost: plan.total_cost,
            source_atoms: group.source_atoms.clone(),
            target_atoms: group.target_atoms.clone(),
            plan,
            duals,
            cost_matrix: cost,
        });
    }
    let plan = TransportPlan::from_couplings(mu0.len(), mu1.len(), couplings, |i, j| global_cost[&(i, j)]);
    Ok(NoncontrollableSolution { plan, fibers, compatibility, report: report.clone(), eps })
}
