//! Discrete optimal transport: measures, an exact LP solver, the reduction of
//! a quadratic cost to the Euclidean one and a Brenier-type certificate.

mod measure;
mod simplex;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lqcost::CostModel;

pub use measure::{
    make_measure, make_measure_indexed, pushforward, pushforward_indexed, sample_box, DiscreteMeasure, SamplingBox,
    DUPLICATE_TOL,
};

/// Masses below this fraction of the total are treated as absent.
pub const MASS_PRUNE: f64 = 1e-14;
/// Tolerance for the split identity of [`quadratic_reduction`].
pub const TOL_SPLIT: f64 = 1e-10;
/// Relative tolerance on cycle slack in [`cyclical_monotonicity_check`].
pub const TOL_CYCLE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

/// Sparse coupling between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Sorted by `(source, target)`.
    pub couplings: Vec<Coupling>,
    pub total_cost: f64,
    /// Every source ships to a single target.
    pub is_map: bool,
    pub sources: usize,
    pub targets: usize,
}

impl TransportPlan {
    /// Builds a plan from raw couplings, merging repeated pairs and dropping
    /// non-positive masses.
    pub fn from_couplings<F>(sources: usize, targets: usize, couplings: Vec<Coupling>, cost: F) -> Self
    where
        F: Fn(usize, usize) -> f64,
    {
        let mut sorted: Vec<Coupling> = couplings.into_iter().filter(|c| c.mass > 0.0).collect();
        sorted.sort_by_key(|c| (c.source, c.target));
        let mut merged: Vec<Coupling> = Vec::with_capacity(sorted.len());
        for c in sorted {
            match merged.last_mut() {
                Some(last) if last.source == c.source && last.target == c.target => last.mass += c.mass,
                _ => merged.push(c),
            }
        }
        let total_cost = merged.iter().map(|c| c.mass * cost(c.source, c.target)).sum();
        let is_map = merged.windows(2).all(|w| w[0].source != w[1].source);
        TransportPlan { couplings: merged, total_cost, is_map, sources, targets }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.sources];
        for c in &self.couplings {
            s[c.source] += c.mass;
        }
        s
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.targets];
        for c in &self.couplings {
            s[c.target] += c.mass;
        }
        s
    }

    pub fn support(&self) -> Vec<(usize, usize)> {
        self.couplings.iter().map(|c| (c.source, c.target)).collect()
    }

    /// `Σ mass·cost` recomputed from a cost matrix.
    pub fn cost_under(&self, cost: &DMatrix<f64>) -> f64 {
        self.couplings.iter().map(|c| c.mass * cost[(c.source, c.target)]).sum()
    }

    /// Largest deviation of the plan marginals from the given weights.
    pub fn marginal_error(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let rows = self.row_sums().iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let cols = self.column_sums().iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.max(cols)
    }
}

/// Kantorovich potentials: `psi_c(j) - psi(i) <= c(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub psi: Vec<f64>,
    pub psi_c: Vec<f64>,
}

impl DualPotentials {
    /// `Σ psi_c ν - Σ psi μ`.
    pub fn dual_value(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let a: f64 = self.psi_c.iter().zip(nu).map(|(p, w)| p * w).sum();
        let b: f64 = self.psi.iter().zip(mu).map(|(p, w)| p * w).sum();
        a - b
    }

    /// Largest violation of `psi_c(j) - psi(i) <= c(i, j)`.
    pub fn max_infeasibility(&self, cost: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, psi) in self.psi.iter().enumerate() {
            for (j, psi_c) in self.psi_c.iter().enumerate() {
                worst = worst.max(psi_c - psi - cost[(i, j)]);
            }
        }
        worst
    }

    /// Largest `|c(i,j) - psi_c(j) + psi(i)|` over the support of `plan`.
    pub fn max_slackness_violation(&self, cost: &DMatrix<f64>, plan: &TransportPlan) -> f64 {
        plan.couplings
            .iter()
            .map(|c| (cost[(c.source, c.target)] - self.psi_c[c.target] + self.psi[c.source]).abs())
            .fold(0.0, f64::max)
    }

    /// c-transform evaluated at an arbitrary point: `sup_j psi_c(j) - c(x, y_j)`.
    pub fn c_transform_at<F>(&self, cost: F, x: &DVector<f64>, nu: &DiscreteMeasure) -> f64
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
    {
        nu.points().iter().zip(&self.psi_c).map(|(y, p)| p - cost(x, y)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solver limits.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolverOptions {
    /// Pivot cap; `None` picks a bound proportional to the problem size.
    pub max_iterations: Option<usize>,
}

/// `C[i][j] = c(x_i, y_j)`.
pub fn cost_matrix<F>(cost: F, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let mut m = DMatrix::zeros(mu.len(), nu.len());
    for (i, x) in mu.points().iter().enumerate() {
        for (j, y) in nu.points().iter().enumerate() {
            let c = cost(x, y);
            if !c.is_finite() {
                return Err(Error::NonFiniteCost { i, j });
            }
            m[(i, j)] = c;
        }
    }
    Ok(m)
}

/// Exact optimal plan and potentials between two discrete measures.
pub fn solve_discrete_ot(
    cost: &DMatrix<f64>,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(TransportPlan, DualPotentials)> {
    solve_weights(cost, mu.weights(), nu.weights(), SolverOptions::default())
}

/// Same as [`solve_discrete_ot`] on raw weight vectors, which need only have
/// equal positive totals.
pub fn solve_weights(
    cost: &DMatrix<f64>,
    mu: &[f64],
    nu: &[f64],
    options: SolverOptions,
) -> Result<(TransportPlan, DualPotentials)> {
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
    if let Some((i, j)) = (0..ns).flat_map(|i| (0..nt).map(move |j| (i, j))).find(|&(i, j)| !cost[(i, j)].is_finite()) {
        return Err(Error::NonFiniteCost { i, j });
    }
    for (index, &weight) in mu.iter().chain(nu).enumerate() {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::NegativeWeight { index, weight });
        }
    }
    let total_mu: f64 = mu.iter().sum();
    let total_nu: f64 = nu.iter().sum();
    if total_mu.is_nan() || total_mu <= 0.0 || (total_mu - total_nu).abs() > 1e-12 * total_mu.max(1.0) {
        return Err(Error::Infeasible(format!("marginal totals differ: {total_mu} vs {total_nu}")));
    }

    // Atoms with negligible mass are removed before solving and get a
    // potential from the c-transform afterwards.
    let rows: Vec<usize> = (0..ns).filter(|&i| mu[i] > MASS_PRUNE * total_mu).collect();
    let cols: Vec<usize> = (0..nt).filter(|&j| nu[j] > MASS_PRUNE * total_nu).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let mut reduced = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            reduced.push(cost[(i, j)]);
        }
    }
    let sol = simplex::transportation_simplex(&reduced, &supply, &demand, options.max_iterations)?;

    let couplings = sol
        .flows
        .iter()
        .map(|&(r, c, mass)| Coupling { source: rows[r], target: cols[c], mass })
        .filter(|c| c.mass > MASS_PRUNE * total_mu)
        .collect();
    let plan = TransportPlan::from_couplings(ns, nt, couplings, |i, j| cost[(i, j)]);

    let mut psi = vec![f64::NAN; ns];
    let mut psi_c = vec![f64::NAN; nt];
    for (k, &i) in rows.iter().enumerate() {
        psi[i] = sol.source_potential[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        psi_c[j] = sol.target_potential[k];
    }
    for j in 0..nt {
        if psi_c[j].is_nan() {
            psi_c[j] = rows.iter().map(|&i| psi[i] + cost[(i, j)]).fold(f64::INFINITY, f64::min);
        }
    }
    for i in 0..ns {
        if psi[i].is_nan() {
            psi[i] = (0..nt).map(|j| psi_c[j] - cost[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let shift = psi[0];
    psi.iter_mut().for_each(|p| *p -= shift);
    psi_c.iter_mut().for_each(|p| *p -= shift);

    Ok((plan, DualPotentials { psi, psi_c }))
}

/// Certificate that `c(x, y) - ½|x - Ey|²` splits into `f(x) + g(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionCertificate {
    /// `f_i = ½<x_i, D x_i> - ½|x_i|²`.
    pub f: Vec<f64>,
    /// `g_j = ½<y_j, F y_j> - ½|E y_j|²`.
    pub g: Vec<f64>,
    /// Largest relative residual of the split over all pairs.
    pub max_split_error: f64,
    pub holds: bool,
}

/// Reduced target measure `E♯μ1`, the atom index map `j -> atom of E y_j`
/// and the split certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticReduction {
    pub target: DiscreteMeasure,
    pub target_index: Vec<usize>,
    pub certificate: ReductionCertificate,
}

/// Replaces the cost `c` by `½|x - ŷ|²` between `μ0` and `E♯μ1`.
pub fn quadratic_reduction(
    model: &CostModel,
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
) -> Result<QuadraticReduction> {
    let zero = DVector::zeros(model.dim());
    let (target, target_index) = pushforward_indexed(mu1, &model.e, &zero)?;
    let f: Vec<f64> = mu0.points().iter().map(|x| 0.5 * x.dot(&(&model.d * x)) - 0.5 * x.norm_squared()).collect();
    let ey: Vec<DVector<f64>> = mu1.points().iter().map(|y| &model.e * y).collect();
    let g: Vec<f64> =
        mu1.points().iter().zip(&ey).map(|(y, e)| 0.5 * y.dot(&(&model.f * y)) - 0.5 * e.norm_squared()).collect();
    let mut max_split_error: f64 = 0.0;
    for (i, x) in mu0.points().iter().enumerate() {
        for (j, y) in mu1.points().iter().enumerate() {
            let c = model.eval(x, y);
            let hat = 0.5 * (x - &ey[j]).norm_squared();
            let err = (c - hat - f[i] - g[j]).abs() / (1.0 + c.abs() + hat);
            max_split_error = max_split_error.max(err);
        }
    }
    Ok(QuadraticReduction {
        target,
        target_index,
        certificate: ReductionCertificate { f, g, max_split_error, holds: max_split_error <= TOL_SPLIT },
    })
}

/// How cycles are enumerated by [`cyclical_monotonicity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleOptions {
    /// Longest cycle length enumerated exhaustively.
    pub exhaustive_length: usize,
    /// Number of random longer cycles.
    pub random_cycles: usize,
    /// Longest random cycle.
    pub max_random_length: usize,
    /// Exhaustive enumeration per length is abandoned (and replaced by the
    /// same number of random cycles) beyond this many cycles.
    pub exhaustive_budget: usize,
    pub seed: u64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            exhaustive_length: 4,
            random_cycles: 10_000,
            max_random_length: 16,
            exhaustive_budget: 5_000_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// Smallest slack found; 0 when no cycle of length >= 2 exists.
    pub min_cycle_slack: f64,
    /// `max|x| · max|Ey|` over the support.
    pub scale: f64,
    pub pass: bool,
    pub cycles_checked: usize,
    /// Coupling indices of the worst cycle.
    pub worst_cycle: Vec<usize>,
    /// Whether every length up to `exhaustive_length` was fully enumerated.
    pub exhaustive: bool,
}

/// Checks that the support `{(x_i, E y_j)}` of the plan is cyclically
/// monotone: for support pairs `(i_k, j_k)`,
/// `Σ <x_{i_k}, E y_{j_k} - E y_{j_{k+1}}> >= 0`.
pub fn cyclical_monotonicity_check(
    plan: &TransportPlan,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    e: &DMatrix<f64>,
    options: CycleOptions,
) -> MonotonicityReport {
    let xs: Vec<&DVector<f64>> = plan.couplings.iter().map(|c| &mu.points()[c.source]).collect();
    let eys: Vec<DVector<f64>> = plan.couplings.iter().map(|c| e * &nu.points()[c.target]).collect();
    let s = xs.len();
    let scale = xs.iter().map(|x| x.norm()).fold(0.0, f64::max) * eys.iter().map(|y| y.norm()).fold(0.0, f64::max);

    let dense = s <= 2048;
    let gram: Vec<f64> = if dense {
        let mut g = vec![0.0; s * s];
        for a in 0..s {
            for b in 0..s {
                g[a * s + b] = xs[a].dot(&eys[b]);
            }
        }
        g
    } else {
        Vec::new()
    };
    let dot = |a: usize, b: usize| if dense { gram[a * s + b] } else { xs[a].dot(&eys[b]) };
    let slack = |cycle: &[usize]| {
        let l = cycle.len();
        (0..l).map(|k| dot(cycle[k], cycle[k]) - dot(cycle[k], cycle[(k + 1) % l])).sum::<f64>()
    };

    let mut min_slack = f64::INFINITY;
    let mut worst = Vec::new();
    let mut checked = 0usize;
    let mut exhaustive = true;
    let mut record = |cycle: &[usize], min_slack: &mut f64, worst: &mut Vec<usize>| {
        let v = slack(cycle);
        checked += 1;
        if v < *min_slack {
            *min_slack = v;
            *worst = cycle.to_vec();
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    for len in 2..=options.exhaustive_length.min(s) {
        if cycle_count(s, len) <= options.exhaustive_budget as f64 {
            // Rotations are removed by fixing the smallest index first.
            let mut cycle = vec![0usize; len];
            for first in 0..s {
                cycle[0] = first;
                enumerate_tails(&mut cycle, 1, first, s, &mut |c| record(c, &mut min_slack, &mut worst));
            }
        } else {
            exhaustive = false;
            for _ in 0..options.exhaustive_budget {
                let c = random_cycle(&mut rng, s, len);
                record(&c, &mut min_slack, &mut worst);
            }
        }
    }
    let longest = options.max_random_length.min(s);
    if longest > options.exhaustive_length {
        let shortest = options.exhaustive_length + 1;
        for _ in 0..options.random_cycles {
            let len = rng.random_range(shortest..=longest);
            let c = random_cycle(&mut rng, s, len);
            record(&c, &mut min_slack, &mut worst);
        }
    }
    if !min_slack.is_finite() {
        min_slack = 0.0;
    }
    let pass = min_slack >= -TOL_CYCLE * scale.max(f64::MIN_POSITIVE);
    MonotonicityReport {
        min_cycle_slack: min_slack,
        scale,
        pass,
        cycles_checked: checked,
        worst_cycle: worst,
        exhaustive,
    }
}

fn cycle_count(s: usize, len: usize) -> f64 {
    // C(s, len) · (len - 1)!
    let mut c = 1.0;
    for k in 0..len {
        c *= (s - k) as f64;
    }
    c / len as f64
}

fn enumerate_tails(cycle: &mut [usize], pos: usize, first: usize, s: usize, visit: &mut dyn FnMut(&[usize])) {
    if pos == cycle.len() {
        visit(cycle);
        return;
    }
    for next in first + 1..s {
        if cycle[1..pos].contains(&next) {
            continue;
        }
        cycle[pos] = next;
        enumerate_tails(cycle, pos + 1, first, s, visit);
    }
}

fn random_cycle(rng: &mut ChaCha8Rng, s: usize, len: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..s).collect();
    for k in 0..len {
        let pick = rng.random_range(k..s);
        pool.swap(k, pick);
    }
    pool.truncate(len);
    pool
}

/// Extracts `source -> target` when the plan is deterministic.
pub fn plan_to_map(plan: &TransportPlan) -> Result<Vec<(usize, usize)>> {
    let mut split = BTreeSet::new();
    for w in plan.couplings.windows(2) {
        if w[0].source == w[1].source {
            split.insert(w[0].source);
        }
    }
    if !split.is_empty() {
        return Err(Error::NotDeterministic { split_sources: split.into_iter().collect() });
    }
    Ok(plan.support())
}

/// Second marginal of a plan (`γ ↦ (π2)♯γ`).
pub fn plan_marginal_2(plan: &TransportPlan) -> Vec<f64> {
    plan.column_sums()
}
