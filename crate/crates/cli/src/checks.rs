//! The `check` suite: closed forms against independent oracles on the
//! configured instance.

use lqot_core::fiber::{fiber_cost_model, forced_cost};
use lqot_core::lqcost::{fundamental_solution, grammian_cost, symplectic_form, CostModel};
use lqot_core::oracle::{
    enumerate_ot, extremal_cost, free_motion_cost, min_cost_piecewise, MAX_PERMUTATION_ATOMS, MAX_VERTEX_ATOMS,
};
use lqot_core::transport::{DiscreteMeasure, TransportPlan};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::commands::{pair_eps, solve_problem, trajectory, PairCost, SolvedKind};
use crate::config::Problem;
use crate::output::{cell, num, OutputDir};
use crate::CliError;

pub const TOL_QUADRATURE: f64 = 1e-6;
pub const TOL_GRAMMIAN: f64 = 1e-8;
pub const TOL_RELATIONS: f64 = 1e-9;
pub const TOL_SYMPLECTIC: f64 = 1e-10;
pub const TOL_LOWER_BOUND: f64 = 1e-8;
pub const TOL_EXTRAPOLATED: f64 = 1e-6;
pub const TOL_FIBER_ORACLE: f64 = 1e-6;
pub const TOL_FREE_MOTION: f64 = 1e-9;
pub const TOL_DUALITY: f64 = 1e-8;
pub const TOL_MARGINALS: f64 = 1e-10;
pub const TOL_ENUMERATION: f64 = 1e-9;
/// Grid used for the trajectory quadrature.
pub const QUADRATURE_INTERVALS: usize = 4096;
/// Pairs drawn from the measures when the config lists none.
pub const DEFAULT_PAIRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub value: f64,
    pub threshold: f64,
    /// How `value` must compare with `threshold`.
    pub relation: &'static str,
    pub detail: String,
}

impl Check {
    fn at_most(name: &'static str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        let status = if value <= threshold { Status::Pass } else { Status::Fail };
        Check { name, status, value, threshold, relation: "<=", detail: detail.into() }
    }

    fn skip(name: &'static str, detail: impl Into<String>) -> Self {
        Check { name, status: Status::Skip, value: f64::NAN, threshold: f64::NAN, relation: "", detail: detail.into() }
    }

    fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "status": match self.status { Status::Pass => "pass", Status::Fail => "fail", Status::Skip => "skip" },
            "value": if self.status == Status::Skip { Value::Null } else { num(self.value) },
            "threshold": if self.status == Status::Skip { Value::Null } else { num(self.threshold) },
            "relation": self.relation,
            "detail": self.detail,
        })
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Pairs to exercise: the configured ones, or the leading atoms of the
/// measures (paired along the optimal plan when the system has fibers).
fn check_pairs(problem: &Problem, plan: Option<&TransportPlan>) -> Vec<(DVector<f64>, DVector<f64>)> {
    if !problem.pairs.is_empty() {
        return problem.pairs.clone();
    }
    let Some((mu0, mu1)) = &problem.measures else { return Vec::new() };
    match plan {
        Some(plan) => plan
            .couplings
            .iter()
            .take(DEFAULT_PAIRS)
            .map(|c| (mu0.points()[c.source].clone(), mu1.points()[c.target].clone()))
            .collect(),
        None => {
            mu0.points().iter().zip(mu1.points()).take(DEFAULT_PAIRS).map(|(x, y)| (x.clone(), y.clone())).collect()
        }
    }
}

fn structure_checks(problem: &Problem, model: &CostModel, checks: &mut Vec<Check>) -> Result<(), CliError> {
    let d = &model.diagnostics;
    checks.push(Check::at_most(
        "structure.relations",
        d.c_relation.max(d.q1_relation),
        TOL_RELATIONS,
        "relative residuals of the C and Q1 identities",
    ));
    let n = problem.system.n();
    let j = symplectic_form(n);
    let mut defect: f64 = 0.0;
    for t in [0.25, 0.5, 0.75, 1.0] {
        let r = fundamental_solution(&problem.system, t)?.assemble();
        defect = defect.max((r.transpose() * &j * &r - &j).amax() / (1.0 + r.amax().powi(2)));
    }
    checks.push(Check::at_most(
        "structure.symplectic",
        defect,
        TOL_SYMPLECTIC,
        "max |R^T J R - J| over t in {1/4, 1/2, 3/4, 1}",
    ));
    let min_eig = d.d_min_eigenvalue.min(d.f_min_eigenvalue);
    checks.push(Check {
        name: "structure.definiteness",
        status: if min_eig > 0.0 { Status::Pass } else { Status::Fail },
        value: min_eig,
        threshold: 0.0,
        relation: ">",
        detail: "smallest eigenvalue of D and F".into(),
    });
    Ok(())
}

fn controllable_pair_checks(
    problem: &Problem,
    pc: &PairCost,
    model: &CostModel,
    pairs: &[(DVector<f64>, DVector<f64>)],
    tol: Option<f64>,
    checks: &mut Vec<Check>,
) -> Result<(), CliError> {
    let sys = &problem.system;
    if pairs.is_empty() {
        for name in ["consistency.quadrature", "oracle.lower_bound", "oracle.monotone", "oracle.convergence"] {
            checks.push(Check::skip(name, "no pairs"));
        }
        return Ok(());
    }
    let mut worst: f64 = 0.0;
    let mut worst_grammian: f64 = 0.0;
    let zero_w = sys.w().amax() == 0.0;
    for (x, y) in pairs {
        let c = model.eval(x, y);
        let traj = trajectory(sys, pc, x, y, QUADRATURE_INTERVALS)?;
        worst = worst.max(rel(traj.running_cost, c));
        if zero_w {
            worst_grammian = worst_grammian.max(rel(grammian_cost(sys, x, y)?, c));
        }
    }
    checks.push(Check::at_most(
        "consistency.quadrature",
        worst,
        tol.unwrap_or(TOL_QUADRATURE),
        format!("closed form vs running-cost quadrature on {} pairs", pairs.len()),
    ));
    if zero_w {
        checks.push(Check::at_most(
            "consistency.grammian",
            worst_grammian,
            tol.unwrap_or(TOL_GRAMMIAN),
            "closed form vs Grammian form",
        ));
    } else {
        checks.push(Check::skip("consistency.grammian", "W is not zero"));
    }

    let pieces = &problem.options.oracle_pieces;
    let (mut lower, mut monotone_violation, mut extrapolation_error) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut gaps = Vec::new();
    for (x, y) in pairs {
        let c = model.eval(x, y);
        let mut previous = f64::INFINITY;
        let mut last = f64::NAN;
        for &k in pieces {
            let (value, _) = min_cost_piecewise(sys, x, y, k.max(sys.n()))?;
            lower = lower.min(value - c);
            monotone_violation = monotone_violation.max(value - previous);
            previous = value;
            last = value;
        }
        gaps.push(last - c);
        // Piecewise-constant error is O(1/K^2); one Richardson step removes
        // the leading term.
        let k = *pieces.iter().max().expect("non-empty") * 2;
        let (v1, _) = min_cost_piecewise(sys, x, y, k)?;
        let (v2, _) = min_cost_piecewise(sys, x, y, 2 * k)?;
        extrapolation_error = extrapolation_error.max(rel((4.0 * v2 - v1) / 3.0, c));
    }
    checks.push(Check::at_most(
        "oracle.lower_bound",
        -lower,
        TOL_LOWER_BOUND,
        "oracle value never below the closed form (value shows -min gap)",
    ));
    checks.push(Check::at_most(
        "oracle.monotone",
        monotone_violation.max(0.0),
        1e-12 * (1.0 + lower.abs()),
        format!("non-increasing over K in {pieces:?}"),
    ));
    let gap_list: Vec<String> = gaps.iter().map(|&g| cell(g)).collect();
    checks.push(Check::at_most(
        "oracle.convergence",
        extrapolation_error,
        tol.unwrap_or(TOL_EXTRAPOLATED),
        format!(
            "Richardson-extrapolated oracle vs closed form; gap at K={}: [{}]",
            pieces.last().expect("non-empty"),
            gap_list.join(", ")
        ),
    ));
    Ok(())
}

fn fiber_pair_checks(
    problem: &Problem,
    pc: &PairCost,
    pairs: &[(DVector<f64>, DVector<f64>)],
    tol: Option<f64>,
    checks: &mut Vec<Check>,
) -> Result<(), CliError> {
    let sys = &problem.system;
    let PairCost::Fibered(fc) = pc else { unreachable!("called for fibered systems") };
    let on_fiber: Vec<_> = pairs
        .iter()
        .filter(|(x, y)| fc.fiber_gap(x, y) <= problem.options.fiber_eps.unwrap_or_else(|| pair_eps(x, y)))
        .collect();
    match &fc.dynamics {
        None => {
            if on_fiber.is_empty() {
                checks.push(Check::skip("free_motion.cost", "no pairs on the graph of e^A"));
                return Ok(());
            }
            let mut worst: f64 = 0.0;
            for (x, _) in &on_fiber {
                worst = worst.max(rel(forced_cost(sys, x)?, free_motion_cost(sys, x)?));
            }
            checks.push(Check::at_most(
                "free_motion.cost",
                worst,
                tol.unwrap_or(TOL_FREE_MOTION),
                "quadrature vs Van Loan integral",
            ));
        }
        Some(dynamics) => {
            if on_fiber.is_empty() {
                checks.push(Check::skip("fiber.oracle", "no pairs on a common fiber"));
                checks.push(Check::skip("fiber.quadrature", "no pairs on a common fiber"));
                return Ok(());
            }
            let (mut relation, mut oracle, mut quadrature) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in &on_fiber {
                let (c, _) = pc.eval(x, y, problem.options.fiber_eps)?.expect("filtered on fiber");
                let fcm = fiber_cost_model(dynamics, &fc.report.fiber_projection(x))?;
                relation = relation.max(fcm.relation_residual);
                oracle = oracle.max(rel(c, extremal_cost(sys, x, y)?));
                quadrature = quadrature.max(rel(trajectory(sys, pc, x, y, QUADRATURE_INTERVALS)?.running_cost, c));
            }
            checks.push(Check::at_most(
                "fiber.relation",
                relation,
                lqot_core::fiber::TOL_AFFINE_RELATION,
                "affine relation of the fiber data",
            ));
            checks.push(Check::at_most(
                "fiber.oracle",
                oracle,
                tol.unwrap_or(TOL_FIBER_ORACLE),
                "fiber closed form vs full-system extremal",
            ));
            checks.push(Check::at_most(
                "fiber.quadrature",
                quadrature,
                tol.unwrap_or(TOL_QUADRATURE),
                "fiber closed form vs trajectory quadrature",
            ));
        }
    }
    Ok(())
}

fn enumeration_gap(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64], value: f64) -> Option<f64> {
    let uniform = |w: &[f64]| w.iter().all(|&x| (x - w[0]).abs() <= 1e-14);
    let small = (mu.len() == nu.len() && mu.len() <= MAX_PERMUTATION_ATOMS && uniform(mu) && uniform(nu))
        || (mu.len() <= MAX_VERTEX_ATOMS && nu.len() <= MAX_VERTEX_ATOMS);
    if !small {
        return None;
    }
    let oracle = enumerate_ot(cost, mu, nu).ok()?;
    Some((value - oracle.total_cost).abs() / (1.0 + oracle.total_cost.abs()))
}

fn transport_checks(
    kind: &SolvedKind,
    plan: &TransportPlan,
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    checks: &mut Vec<Check>,
) {
    checks.push(Check::at_most(
        "transport.marginals",
        plan.marginal_error(mu0.weights(), mu1.weights()),
        TOL_MARGINALS,
        "max marginal deviation of the plan",
    ));
    match kind {
        SolvedKind::Controllable { cost, duals, monotonicity, .. } => {
            let scale = 1.0 + cost.amax();
            let gap = (plan.total_cost - duals.dual_value(mu0.weights(), mu1.weights())).abs() / scale;
            checks.push(Check::at_most(
                "transport.duality",
                gap,
                TOL_DUALITY,
                "primal-dual gap relative to 1 + max|C|",
            ));
            match enumeration_gap(cost, mu0.weights(), mu1.weights(), plan.total_cost) {
                Some(g) => checks.push(Check::at_most(
                    "transport.enumeration",
                    g,
                    TOL_ENUMERATION,
                    "solver vs exhaustive enumeration",
                )),
                None => checks.push(Check::skip("transport.enumeration", "instance beyond enumeration bounds")),
            }
            checks.push(Check::at_most(
                "transport.monotonicity",
                (-monotonicity.min_cycle_slack / (1.0 + monotonicity.scale)).max(0.0),
                lqot_core::transport::TOL_CYCLE,
                format!("{} cycles checked", monotonicity.cycles_checked),
            ));
        }
        SolvedKind::Fibered { solution, monotonicity } => {
            let (mut gap, mut enum_gap, mut enumerated, mut slack, mut certified) =
                (0.0f64, 0.0f64, 0usize, 0.0f64, 0usize);
            for (f, m) in solution.fibers.iter().zip(monotonicity) {
                let mu: Vec<f64> = f.plan.row_sums();
                let nu: Vec<f64> = f.plan.column_sums();
                let scale = 1.0 + f.cost_matrix.amax();
                gap = gap.max((f.cost - f.duals.dual_value(&mu, &nu)).abs() / scale);
                if let Some(g) = enumeration_gap(&f.cost_matrix, &mu, &nu, f.cost) {
                    enum_gap = enum_gap.max(g);
                    enumerated += 1;
                }
                if let Some(m) = m {
                    certified += 1;
                    slack = slack.max((-m.min_cycle_slack / (1.0 + m.scale)).max(0.0));
                }
            }
            checks.push(Check::at_most("transport.duality", gap, TOL_DUALITY, "worst per-fiber primal-dual gap"));
            if enumerated > 0 {
                checks.push(Check::at_most(
                    "transport.enumeration",
                    enum_gap,
                    TOL_ENUMERATION,
                    format!("{enumerated} of {} fibers enumerated", solution.fibers.len()),
                ));
            } else {
                checks.push(Check::skip("transport.enumeration", "fibers beyond enumeration bounds"));
            }
            if certified > 0 {
                checks.push(Check::at_most(
                    "transport.monotonicity",
                    slack,
                    lqot_core::transport::TOL_CYCLE,
                    "worst per-fiber cycle slack",
                ));
            } else {
                checks.push(Check::skip("transport.monotonicity", "no controlled directions; plans follow e^A"));
            }
        }
    }
}

pub fn run_checks(problem: &Problem) -> Result<Vec<Check>, CliError> {
    let sys = &problem.system;
    let pc = PairCost::new(sys)?;
    let tol = problem.options.tol;
    let mut checks = Vec::new();

    let solved = match &problem.measures {
        None => None,
        Some(_) => match solve_problem(problem) {
            Ok(s) => Some(s),
            Err(CliError::Core(lqot_core::Error::IncompatibleMarginals { discrepancy })) => {
                checks.push(Check::at_most(
                    "fiber.compatibility",
                    discrepancy,
                    tol.unwrap_or(lqot_core::fiber::TOL_MASS),
                    "fiber mass balance",
                ));
                None
            }
            Err(e) => return Err(e),
        },
    };
    let pairs = check_pairs(problem, solved.as_ref().map(|s| &s.plan));

    match &pc {
        PairCost::Controllable(model) => {
            structure_checks(problem, model, &mut checks)?;
            controllable_pair_checks(problem, &pc, model, &pairs, tol, &mut checks)?;
        }
        PairCost::Fibered(_) => fiber_pair_checks(problem, &pc, &pairs, tol, &mut checks)?,
    }
    match (&problem.measures, &solved) {
        (Some((mu0, mu1)), Some(s)) => transport_checks(&s.kind, &s.plan, mu0, mu1, &mut checks),
        (None, _) => checks.push(Check::skip("transport", "no measures configured")),
        _ => {}
    }
    Ok(checks)
}

pub fn check(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    let checks = run_checks(problem)?;
    let failed = checks.iter().filter(|c| c.status == Status::Fail).count();
    let doc = json!({
        "pass": failed == 0,
        "failed": failed,
        "checks": checks.iter().map(Check::to_json).collect::<Vec<_>>(),
    });
    out.write_json("check.json", &doc)?;
    let lines: Vec<String> = checks
        .iter()
        .map(|c| {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skip => "SKIP",
            };
            if c.status == Status::Skip {
                format!("{tag} {} ({})", c.name, c.detail)
            } else {
                format!("{tag} {} {} {} {} ({})", c.name, cell(c.value), c.relation, cell(c.threshold), c.detail)
            }
        })
        .collect();
    let summary = lines.join("\n");
    if failed > 0 {
        println!("{summary}");
        return Err(CliError::ChecksFailed { failed });
    }
    Ok(summary)
}
