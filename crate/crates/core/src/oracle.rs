//! Brute-force references: direct optimization over piecewise-constant
//! controls, exhaustive enumeration of small transport problems, and cost
//! evaluation along a shooting extremal of the full system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsys::LinearQuadraticSystem;
use crate::lqcost::hamiltonian_matrix;
use crate::numerics::{block, integrate, matrix_exponential};
use crate::transport::{Coupling, TransportPlan};

/// Largest relative KKT residual accepted.
pub const TOL_KKT: f64 = 1e-10;
/// Largest relative endpoint residual accepted.
pub const TOL_ENDPOINT: f64 = 1e-8;
/// Largest instance size for permutation enumeration.
pub const MAX_PERMUTATION_ATOMS: usize = 8;
/// Largest instance size (per side) for vertex enumeration.
pub const MAX_VERTEX_ATOMS: usize = 5;

/// Control that is constant on each of `K` equal subintervals of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseControl {
    pub values: Vec<DVector<f64>>,
}

impl PiecewiseControl {
    pub fn pieces(&self) -> usize {
        self.values.len()
    }
}

/// Exact one-piece propagation data for step `h`.
struct PieceStep {
    /// `e^{hA}`.
    phi: DMatrix<f64>,
    /// `∫_0^h e^{sA} ds B`.
    gamma: DMatrix<f64>,
    /// `∫_0^h e^{sĀ^T} diag(W, 0) e^{sĀ} ds` for `Ā = [[A, B], [0, 0]]`.
    q: DMatrix<f64>,
}

fn piece_step(sys: &LinearQuadraticSystem, h: f64) -> Result<PieceStep> {
    let (n, m) = (sys.n(), sys.m());
    let k = n + m;
    let mut abar = DMatrix::zeros(k, k);
    abar.view_mut((0, 0), (n, n)).copy_from(sys.a());
    abar.view_mut((0, n), (n, m)).copy_from(sys.b());
    let mut wbar = DMatrix::zeros(k, k);
    wbar.view_mut((0, 0), (n, n)).copy_from(sys.w());
    let mut big = DMatrix::zeros(2 * k, 2 * k);
    big.view_mut((0, 0), (k, k)).copy_from(&(-abar.transpose()));
    big.view_mut((0, k), (k, k)).copy_from(&wbar);
    big.view_mut((k, k), (k, k)).copy_from(&abar);
    let e = matrix_exponential(&big, h)?;
    let f12 = block(&e, 0, k, k, k);
    let f22 = block(&e, k, k, k, k);
    let q = f22.transpose() * f12;
    Ok(PieceStep { phi: block(&f22, 0, 0, n, n), gamma: block(&f22, 0, n, n, m), q: (&q + q.transpose()) * 0.5 })
}

/// Exact cost and final state of a piecewise-constant control from `x`.
pub fn piecewise_cost(
    sys: &LinearQuadraticSystem,
    x: &DVector<f64>,
    control: &PiecewiseControl,
) -> Result<(f64, DVector<f64>)> {
    let k = control.pieces();
    if k == 0 {
        return Err(Error::PreconditionViolated("control needs at least one piece".into()));
    }
    let (n, m) = (sys.n(), sys.m());
    let h = 1.0 / k as f64;
    let step = piece_step(sys, h)?;
    let mut state = x.clone();
    let mut cost = 0.0;
    for u in &control.values {
        let mut zeta = DVector::zeros(n + m);
        zeta.rows_mut(0, n).copy_from(&state);
        zeta.rows_mut(n, m).copy_from(u);
        cost += 0.5 * zeta.dot(&(&step.q * &zeta)) + 0.5 * h * u.dot(&(sys.u() * u));
        state = &step.phi * &state + &step.gamma * u;
    }
    Ok((cost, state))
}

/// Minimum of the exact cost over `K`-piece controls steering `x` to `y`.
///
/// The cost is a positive definite quadratic in the `K m` control values and
/// the endpoint constraint is affine, so the optimum solves a KKT system. A
/// rank-deficient constraint (non-controllable system, target on the
/// reachable fiber) is reduced through its singular value decomposition.
pub fn min_cost_piecewise(
    sys: &LinearQuadraticSystem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    k: usize,
) -> Result<(f64, PiecewiseControl)> {
    if k == 0 {
        return Err(Error::PreconditionViolated("K must be at least 1".into()));
    }
    let (n, m) = (sys.n(), sys.m());
    let dim = k * m;
    let h = 1.0 / k as f64;
    let step = piece_step(sys, h)?;

    let mut hess = DMatrix::zeros(dim, dim);
    let mut grad = DVector::zeros(dim);
    let mut c0 = 0.0;
    // x_k = a + S ξ
    let mut a = x.clone();
    let mut s = DMatrix::zeros(n, dim);
    for piece in 0..k {
        // [x_k; u_k] = alpha + L ξ
        let mut l = DMatrix::zeros(n + m, dim);
        l.view_mut((0, 0), (n, dim)).copy_from(&s);
        for r in 0..m {
            l[(n + r, piece * m + r)] = 1.0;
        }
        let mut alpha = DVector::zeros(n + m);
        alpha.rows_mut(0, n).copy_from(&a);
        let ql = &step.q * &l;
        hess += l.transpose() * &ql;
        grad += ql.transpose() * &alpha;
        c0 += 0.5 * alpha.dot(&(&step.q * &alpha));
        let mut diag = hess.view_mut((piece * m, piece * m), (m, m));
        diag += sys.u() * h;

        a = &step.phi * &a;
        let mut next = &step.phi * &s;
        let mut col = next.view_mut((0, piece * m), (n, m));
        col += &step.gamma;
        s = next;
    }
    let hess = (&hess + hess.transpose()) * 0.5;

    let r = y - &a;
    let svd = s.clone().svd(true, true);
    let (u_mat, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sigma = svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > 1e-10 * sigma_max.max(f64::MIN_POSITIVE)).collect();
    let mut projected = DVector::zeros(n);
    for &i in &keep {
        let col = u_mat.column(i);
        projected += col * col.dot(&r);
    }
    let residual = (&r - &projected).norm();
    if residual > TOL_ENDPOINT * (1.0 + r.norm()) {
        return Err(Error::UnreachableEndpoint { residual });
    }

    let rho = keep.len();
    let mut kkt = DMatrix::zeros(dim + rho, dim + rho);
    let mut rhs = DVector::zeros(dim + rho);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(&hess);
    rhs.rows_mut(0, dim).copy_from(&(-&grad));
    for (row, &i) in keep.iter().enumerate() {
        let c = vt.row(i);
        kkt.view_mut((dim + row, 0), (1, dim)).copy_from(&c);
        kkt.view_mut((0, dim + row), (dim, 1)).copy_from(&c.transpose());
        rhs[dim + row] = u_mat.column(i).dot(&r) / sigma[i];
    }
    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned { what: "KKT system".into(), condition: f64::INFINITY })?;
    let kkt_residual = (&kkt * &sol - &rhs).norm() / (1.0 + rhs.norm()).max(kkt.norm() * sol.norm());
    if kkt_residual > TOL_KKT {
        return Err(Error::ConsistencyFailure { relation: "KKT residual".into(), residual: kkt_residual });
    }
    let xi = sol.rows(0, dim).into_owned();
    let value = 0.5 * xi.dot(&(&hess * &xi)) + grad.dot(&xi) + c0;
    let values = (0..k).map(|p| xi.rows(p * m, m).into_owned()).collect();
    Ok((value, PiecewiseControl { values }))
}

/// Cost along the extremal of the full Hamiltonian system that reaches `y`,
/// with the initial adjoint taken from the pseudo-inverse of `R2(1)`. Needs no
/// controllability decomposition: any extremal meeting the endpoint is
/// optimal because the problem is convex.
pub fn extremal_cost(sys: &LinearQuadraticSystem, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = sys.n();
    let ham = hamiltonian_matrix(sys);
    let r = matrix_exponential(&ham, 1.0)?;
    let r1 = block(&r, 0, 0, n, n);
    let r2 = block(&r, 0, n, n, n);
    let rhs = y - &r1 * x;
    let sigma_max = r2.amax().max(f64::MIN_POSITIVE);
    let pinv = r2
        .clone()
        .svd(true, true)
        .pseudo_inverse(1e-12 * sigma_max)
        .map_err(|e| Error::PreconditionViolated(e.to_string()))?;
    let p = pinv * &rhs;
    let residual = (&r1 * x + &r2 * &p - y).norm();
    if residual > TOL_ENDPOINT * (1.0 + y.norm()) {
        return Err(Error::UnreachableEndpoint { residual });
    }
    let mut start = DVector::zeros(2 * n);
    start.rows_mut(0, n).copy_from(x);
    start.rows_mut(n, n).copy_from(&p);
    let gain = sys.u_inv() * sys.b().transpose();
    let v = integrate(
        |t| {
            let z = matrix_exponential(&ham, t)? * &start;
            let xs = z.rows(0, n).into_owned();
            let us = &gain * z.rows(n, n);
            Ok(DVector::from_element(1, sys.lagrangian(&xs, &us)))
        },
        0.0,
        1.0,
    )?;
    Ok(v[0])
}

/// `½<x, (∫_0^1 e^{tA^T} W e^{tA} dt) x>` through a single exponential of the
/// block matrix `[[-A^T, W], [0, A]]`.
pub fn free_motion_cost(sys: &LinearQuadraticSystem, x: &DVector<f64>) -> Result<f64> {
    let n = sys.n();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-sys.a().transpose()));
    big.view_mut((0, n), (n, n)).copy_from(sys.w());
    big.view_mut((n, n), (n, n)).copy_from(sys.a());
    let e = matrix_exponential(&big, 1.0)?;
    let gram = block(&e, n, n, n, n).transpose() * block(&e, 0, n, n, n);
    Ok(0.5 * x.dot(&(gram * x)))
}

/// Exact optimal plan of a tiny instance by exhaustive search.
///
/// Uniform marginals with equal counts (at most 8) are searched over
/// permutations; anything else with at most 5 atoms per side over the
/// vertices of the transport polytope. Ties keep the lexicographically first
/// candidate.
pub fn enumerate_ot(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    let (ns, nt) = (mu.len(), nu.len());
    if cost.nrows() != ns || cost.ncols() != nt {
        return Err(Error::ShapeMismatch {
            field: "cost".into(),
            expected: format!("{ns}x{nt}"),
            found: format!("{}x{}", cost.nrows(), cost.ncols()),
        });
    }
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyMeasure);
    }
    let uniform = |w: &[f64]| w.iter().all(|&v| (v - w[0]).abs() <= 1e-12 * w[0].abs());
    if ns == nt && ns <= MAX_PERMUTATION_ATOMS && uniform(mu) && uniform(nu) {
        return Ok(best_permutation(cost, mu));
    }
    if ns <= MAX_VERTEX_ATOMS && nt <= MAX_VERTEX_ATOMS {
        return best_vertex(cost, mu, nu);
    }
    Err(Error::TooLarge(format!("{ns}x{nt} instance")))
}

fn best_permutation(cost: &DMatrix<f64>, mu: &[f64]) -> TransportPlan {
    let n = mu.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let couplings = best.iter().enumerate().map(|(i, &j)| Coupling { source: i, target: j, mass: mu[i] }).collect();
    TransportPlan::from_couplings(n, n, couplings, |i, j| cost[(i, j)])
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Every spanning tree of the bipartite graph is a basis; the feasible ones
/// are the vertices of the transport polytope.
fn best_vertex(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    let (ns, nt) = (mu.len(), nu.len());
    let arcs: Vec<(usize, usize)> = (0..ns).flat_map(|i| (0..nt).map(move |j| (i, j))).collect();
    let need = ns + nt - 1;
    let mut best: Option<(f64, Vec<Coupling>)> = None;
    let mut chosen = Vec::with_capacity(need);
    let mut uf: Vec<usize> = (0..ns + nt).collect();
    search_trees(&arcs, ns, 0, need, &mut chosen, &mut uf, &mut |tree| {
        if let Some(flows) = tree_flows(tree, mu, nu) {
            if flows.iter().all(|&f| f >= -1e-14) {
                let c: f64 = tree.iter().zip(&flows).map(|(&(i, j), f)| f * cost[(i, j)]).sum();
                if best.as_ref().is_none_or(|(b, _)| c < *b) {
                    let couplings = tree
                        .iter()
                        .zip(&flows)
                        .filter(|(_, &f)| f > 0.0)
                        .map(|(&(i, j), &f)| Coupling { source: i, target: j, mass: f })
                        .collect();
                    best = Some((c, couplings));
                }
            }
        }
    });
    let (_, couplings) = best.ok_or_else(|| Error::Infeasible("no feasible vertex".into()))?;
    Ok(TransportPlan::from_couplings(ns, nt, couplings, |i, j| cost[(i, j)]))
}

fn find(uf: &[usize], mut i: usize) -> usize {
    while uf[i] != i {
        i = uf[i];
    }
    i
}

type TreeVisitor<'a> = dyn FnMut(&[(usize, usize)]) + 'a;

fn search_trees(
    arcs: &[(usize, usize)],
    ns: usize,
    start: usize,
    need: usize,
    chosen: &mut Vec<(usize, usize)>,
    uf: &mut Vec<usize>,
    visit: &mut TreeVisitor,
) {
    if chosen.len() == need {
        visit(chosen);
        return;
    }
    for k in start..arcs.len() {
        if arcs.len() - k < need - chosen.len() {
            break;
        }
        let (i, j) = arcs[k];
        let (ri, rj) = (find(uf, i), find(uf, ns + j));
        if ri == rj {
            continue;
        }
        let saved = uf.clone();
        uf[ri] = rj;
        chosen.push(arcs[k]);
        search_trees(arcs, ns, k + 1, need, chosen, uf, visit);
        chosen.pop();
        *uf = saved;
    }
}

/// Flows on a spanning tree meeting the marginals, by peeling leaves.
fn tree_flows(tree: &[(usize, usize)], mu: &[f64], nu: &[f64]) -> Option<Vec<f64>> {
    let ns = mu.len();
    let mut residual: Vec<f64> = mu.iter().chain(nu.iter()).copied().collect();
    let mut degree = vec![0usize; residual.len()];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[ns + j] += 1;
    }
    let mut flows = vec![f64::NAN; tree.len()];
    let mut done = vec![false; tree.len()];
    for _ in 0..tree.len() {
        let (k, leaf) = tree.iter().enumerate().find_map(|(k, &(i, j))| {
            if done[k] {
                None
            } else if degree[i] == 1 {
                Some((k, i))
            } else if degree[ns + j] == 1 {
                Some((k, ns + j))
            } else {
                None
            }
        })?;
        let (i, j) = tree[k];
        let other = if leaf == i { ns + j } else { i };
        let f = residual[leaf];
        flows[k] = f;
        residual[leaf] = 0.0;
        residual[other] -= f;
        degree[i] -= 1;
        degree[ns + j] -= 1;
        done[k] = true;
    }
    Some(flows)
}
