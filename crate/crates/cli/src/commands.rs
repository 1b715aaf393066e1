//! One function per verb. Each writes its artifacts into the output
//! directory and returns a short human summary for stdout.

use lqot_core::fiber::{
    compatibility_check, default_fiber_eps, fiber_cost_model, fiber_trajectory, solve_noncontrollable, FiberCost,
    FiberOptions, FiberSolution, NoncontrollableSolution, TOL_MASS,
};
use lqot_core::linsys::{ControllabilityReport, LinearQuadraticSystem};
use lqot_core::lqcost::{cost_matrices, optimal_trajectory, trajectory_from_adjoint, CostModel, OptimalTrajectory};
use lqot_core::transport::{
    cost_matrix, cyclical_monotonicity_check, make_measure_indexed, plan_to_map, Coupling, CycleOptions,
    DiscreteMeasure, DualPotentials, MonotonicityReport, TransportPlan,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::Problem;
use crate::output::{cell, indexed, matrix, num, vector, OutputDir};
use crate::CliError;

/// Pair cost of either kind of system.
pub enum PairCost {
    Controllable(Box<CostModel>),
    Fibered(Box<FiberCost>),
}

impl PairCost {
    pub fn new(sys: &LinearQuadraticSystem) -> Result<Self, CliError> {
        if sys.is_controllable() {
            Ok(PairCost::Controllable(Box::new(cost_matrices(sys)?)))
        } else {
            Ok(PairCost::Fibered(Box::new(FiberCost::new(sys)?)))
        }
    }

    /// Cost and initial adjoint; `None` when `y` is off the fiber of `x`.
    pub fn eval(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        eps: Option<f64>,
    ) -> Result<Option<(f64, DVector<f64>)>, CliError> {
        match self {
            PairCost::Controllable(model) => Ok(Some((model.eval(x, y), model.initial_adjoint(x, y)))),
            PairCost::Fibered(model) => Ok(model.pair(x, y, eps.unwrap_or_else(|| pair_eps(x, y)))?),
        }
    }
}

pub fn pair_eps(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    default_fiber_eps(x.amax().max(y.amax()))
}

pub fn trajectory(
    sys: &LinearQuadraticSystem,
    cost: &PairCost,
    x: &DVector<f64>,
    y: &DVector<f64>,
    intervals: usize,
) -> Result<OptimalTrajectory, CliError> {
    Ok(match cost {
        PairCost::Controllable(model) => optimal_trajectory(sys, model, x, y, intervals)?,
        PairCost::Fibered(model) => match &model.dynamics {
            Some(dynamics) => fiber_trajectory(sys, dynamics, x, y, intervals)?,
            None => trajectory_from_adjoint(sys, x, &DVector::zeros(sys.n()), intervals)?,
        },
    })
}

fn report_json(report: &ControllabilityReport) -> Value {
    json!({
        "rank": report.rank,
        "controllable": report.is_controllable,
        "singular_values": report.singular_values.iter().map(|&s| num(s)).collect::<Vec<_>>(),
        "basis": matrix(&report.basis),
        "transform": matrix(&report.transform),
        "blocks": report.blocks.as_ref().map(|b| json!({
            "A1": matrix(&b.a1),
            "A2": matrix(&b.a2),
            "A3": matrix(&b.a3),
            "B1": matrix(&b.b1),
            "residual": num(b.residual),
        })),
    })
}

fn model_json(model: &CostModel) -> Value {
    let d = &model.diagnostics;
    json!({
        "D": matrix(&model.d),
        "E": matrix(&model.e),
        "F": matrix(&model.f),
        "E_inv": matrix(&model.e_inv),
        "cond_R2": num(d.cond_r2),
        "residuals": {
            "C_relation": num(d.c_relation),
            "Q1_relation": num(d.q1_relation),
            "D_asymmetry": num(d.d_asymmetry),
            "F_asymmetry": num(d.f_asymmetry),
        },
        "D_min_eigenvalue": num(d.d_min_eigenvalue),
        "F_min_eigenvalue": num(d.f_min_eigenvalue),
    })
}

pub fn analyze(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    let sys = &problem.system;
    let report = sys.controllability();
    let cost = if report.is_controllable { Some(model_json(&cost_matrices(sys)?)) } else { None };
    let reduced = match (&report.is_controllable, report.rank) {
        (false, r) if r > 0 => {
            let fc = FiberCost::new(sys)?;
            let dynamics = fc.dynamics.as_ref().expect("rank > 0 has fiber dynamics");
            Some(json!({
                "model": model_json(&dynamics.reduced),
                "W1": matrix(&dynamics.w1),
                "W2": matrix(&dynamics.w2),
                "W3": matrix(&dynamics.w3),
                "exp_A2": matrix(&fc.exp_a2),
            }))
        }
        _ => None,
    };
    let doc = json!({
        "n": sys.n(),
        "m": sys.m(),
        "controllability": report_json(&report),
        "cost": cost,
        "reduced": reduced,
    });
    out.write_json("analyze.json", &doc)?;
    Ok(format!(
        "rank {} of {} ({})",
        report.rank,
        sys.n(),
        if report.is_controllable { "controllable" } else { "not controllable" }
    ))
}

fn require_pairs(problem: &Problem) -> Result<(), CliError> {
    if problem.pairs.is_empty() {
        return Err(CliError::Config("pairs: at least one pair is required".into()));
    }
    Ok(())
}

pub fn cost(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    require_pairs(problem)?;
    let pc = PairCost::new(&problem.system)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (k, (x, y)) in problem.pairs.iter().enumerate() {
        let value = pc.eval(x, y, problem.options.fiber_eps)?;
        let (c, p0) = match &value {
            Some((c, p)) => (num(*c), vector(p)),
            None => (num(f64::INFINITY), Value::Null),
        };
        lines.push(format!("pair {k}: {}", value.as_ref().map_or("+inf".into(), |(c, _)| cell(*c))));
        rows.push(json!({ "x": vector(x), "y": vector(y), "cost": c, "p0": p0 }));
    }
    out.write_json("cost.json", &json!({ "pairs": rows }))?;
    Ok(lines.join("\n"))
}

pub fn trajectories(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    require_pairs(problem)?;
    let sys = &problem.system;
    let pc = PairCost::new(sys)?;
    let (n, m) = (sys.n(), sys.m());
    let header: Vec<String> =
        std::iter::once("t".to_string()).chain(indexed("x", n)).chain(indexed("p", n)).chain(indexed("u", m)).collect();
    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for (k, (x, y)) in problem.pairs.iter().enumerate() {
        let Some((c, _)) = pc.eval(x, y, problem.options.fiber_eps)? else {
            summary.push(json!({ "pair": k, "cost": num(f64::INFINITY), "file": Value::Null }));
            lines.push(format!("pair {k}: off fiber, no trajectory"));
            continue;
        };
        let traj = trajectory(sys, &pc, x, y, problem.options.trajectory_intervals)?;
        let file = format!("trajectory_{k}.csv");
        let rows = (0..traj.times.len()).map(|i| {
            std::iter::once(traj.times[i])
                .chain(traj.states[i].iter().copied())
                .chain(traj.adjoints[i].iter().copied())
                .chain(traj.controls[i].iter().copied())
                .map(cell)
                .collect()
        });
        out.write_csv(&file, &header, rows)?;
        let endpoint_error = (traj.final_state() - y).norm();
        summary.push(json!({
            "pair": k,
            "cost": num(c),
            "running_cost": num(traj.running_cost),
            "endpoint_error": num(endpoint_error),
            "file": file,
        }));
        lines.push(format!("pair {k}: cost {} -> {file}", cell(c)));
    }
    out.write_json("trajectory.json", &json!({ "intervals": problem.options.trajectory_intervals, "pairs": summary }))?;
    Ok(lines.join("\n"))
}

fn measures(problem: &Problem) -> Result<&(DiscreteMeasure, DiscreteMeasure), CliError> {
    problem.measures.as_ref().ok_or_else(|| CliError::Config("measures: required by this command".into()))
}

fn measure_json(mu: &DiscreteMeasure) -> Value {
    json!({
        "points": mu.points().iter().map(vector).collect::<Vec<_>>(),
        "weights": mu.weights().iter().map(|&w| num(w)).collect::<Vec<_>>(),
    })
}

fn plan_json(plan: &TransportPlan) -> Value {
    Value::Array(plan.couplings.iter().map(|c| json!({ "i": c.source, "j": c.target, "mass": num(c.mass) })).collect())
}

fn duals_json(duals: &DualPotentials) -> Value {
    json!({
        "psi": duals.psi.iter().map(|&x| num(x)).collect::<Vec<_>>(),
        "psi_c": duals.psi_c.iter().map(|&x| num(x)).collect::<Vec<_>>(),
    })
}

fn monotonicity_json(m: &MonotonicityReport) -> Value {
    json!({
        "pass": m.pass,
        "min_cycle_slack": num(m.min_cycle_slack),
        "scale": num(m.scale),
        "cycles_checked": m.cycles_checked,
        "exhaustive": m.exhaustive,
        "worst_cycle": m.worst_cycle,
    })
}

fn map_json(plan: &TransportPlan) -> Value {
    match plan_to_map(plan) {
        Ok(map) => Value::Array(map.into_iter().map(|(i, j)| json!([i, j])).collect()),
        Err(_) => Value::Null,
    }
}

pub fn cycle_options(seed: u64) -> CycleOptions {
    CycleOptions { seed, ..CycleOptions::default() }
}

/// Result of `solve` on either kind of system.
pub struct Solved {
    pub plan: TransportPlan,
    pub kind: SolvedKind,
}

pub enum SolvedKind {
    Controllable { model: Box<CostModel>, cost: DMatrix<f64>, duals: DualPotentials, monotonicity: MonotonicityReport },
    Fibered { solution: Box<NoncontrollableSolution>, monotonicity: Vec<Option<MonotonicityReport>> },
}

/// Cyclical monotonicity of one fiber plan in the controllable coordinates,
/// where the fiber cost has the cross term `-<x1, E y1>`. `None` when
/// `d = 0`.
pub fn fiber_monotonicity(
    fc: &FiberCost,
    fiber: &FiberSolution,
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    seed: u64,
) -> Result<Option<MonotonicityReport>, CliError> {
    let Some(dynamics) = &fc.dynamics else { return Ok(None) };
    let fcm = fiber_cost_model(dynamics, &fiber.source_label)?;
    let x1: Vec<DVector<f64>> = fiber.source_atoms.iter().map(|&i| fc.report.to_kalman(&mu0.points()[i]).0).collect();
    let y1: Vec<DVector<f64>> = fiber.target_atoms.iter().map(|&j| fc.report.to_kalman(&mu1.points()[j]).0).collect();
    let (ns, nt) = (x1.len(), y1.len());
    let (xm, xi) = make_measure_indexed(x1, vec![1.0; ns])?;
    let (ym, yi) = make_measure_indexed(y1, vec![1.0; nt])?;
    let couplings = fiber
        .plan
        .couplings
        .iter()
        .map(|c| Coupling {
            source: xi[c.source].expect("positive weight"),
            target: yi[c.target].expect("positive weight"),
            mass: c.mass,
        })
        .collect();
    let plan = TransportPlan::from_couplings(xm.len(), ym.len(), couplings, |_, _| 0.0);
    Ok(Some(cyclical_monotonicity_check(&plan, &xm, &ym, &fcm.e, cycle_options(seed))))
}

pub fn solve_problem(problem: &Problem) -> Result<Solved, CliError> {
    let (mu0, mu1) = measures(problem)?;
    let sys = &problem.system;
    if sys.is_controllable() {
        let model = cost_matrices(sys)?;
        let cost = cost_matrix(|x, y| model.eval(x, y), mu0, mu1)?;
        let (plan, duals) =
            lqot_core::transport::solve_weights(&cost, mu0.weights(), mu1.weights(), problem.options.solver)?;
        let monotonicity = cyclical_monotonicity_check(&plan, mu0, mu1, &model.e, cycle_options(problem.seed));
        Ok(Solved { plan, kind: SolvedKind::Controllable { model: Box::new(model), cost, duals, monotonicity } })
    } else {
        let options = FiberOptions {
            eps: problem.options.fiber_eps,
            mass_tol: problem.options.tol.unwrap_or(TOL_MASS),
            solver: problem.options.solver,
        };
        let solution = solve_noncontrollable(sys, mu0, mu1, options)?;
        let fc = FiberCost::new(sys)?;
        let monotonicity = solution
            .fibers
            .iter()
            .map(|f| fiber_monotonicity(&fc, f, mu0, mu1, problem.seed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Solved {
            plan: solution.plan.clone(),
            kind: SolvedKind::Fibered { solution: Box::new(solution), monotonicity },
        })
    }
}

/// Writes the fiber-by-fiber mass balance when the marginals do not match.
fn write_incompatibility(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    let (mu0, mu1) = measures(problem)?;
    let fc = FiberCost::new(&problem.system)?;
    let scale = mu0.points().iter().chain(mu1.points()).map(|p| p.amax()).fold(0.0, f64::max);
    let eps = problem.options.fiber_eps.unwrap_or_else(|| default_fiber_eps(scale));
    let check = compatibility_check(mu0, mu1, &fc.report, &fc.exp_a2, problem.options.tol.unwrap_or(TOL_MASS), eps);
    let groups: Vec<Value> = check
        .groups
        .iter()
        .map(|g| {
            json!({
                "label": vector(&g.target_label),
                "source_atoms": g.source_atoms,
                "target_atoms": g.target_atoms,
                "source_mass": num(g.source_mass),
                "target_mass": num(g.target_mass),
            })
        })
        .collect();
    out.write_json("incompatibility.json", &json!({ "discrepancy": num(check.discrepancy), "fibers": groups }))?;
    Ok(format!("incompatible marginals: discrepancy {} over {} fibers", cell(check.discrepancy), check.groups.len()))
}

pub fn solve(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    let (mu0, mu1) = measures(problem)?;
    let solved = match solve_problem(problem) {
        Err(CliError::Core(e @ lqot_core::Error::IncompatibleMarginals { .. })) => {
            let report = write_incompatibility(problem, out)?;
            eprintln!("{report}");
            return Err(CliError::Core(e));
        }
        other => other?,
    };
    let plan = &solved.plan;
    let mut doc = json!({
        "controllable": matches!(solved.kind, SolvedKind::Controllable { .. }),
        "total_cost": num(plan.total_cost),
        "is_map": plan.is_map,
        "map": map_json(plan),
        "couplings": plan_json(plan),
        "source": measure_json(mu0),
        "target": measure_json(mu1),
    });
    let fields = doc.as_object_mut().expect("object literal");
    let mono_summary = match &solved.kind {
        SolvedKind::Controllable { duals, monotonicity, .. } => {
            fields.insert("duals".into(), duals_json(duals));
            fields.insert("dual_value".into(), num(duals.dual_value(mu0.weights(), mu1.weights())));
            fields.insert("monotonicity".into(), monotonicity_json(monotonicity));
            fields.insert("fibers".into(), Value::Null);
            monotonicity.pass
        }
        SolvedKind::Fibered { solution, monotonicity } => {
            let fibers: Vec<Value> = solution
                .fibers
                .iter()
                .zip(monotonicity)
                .map(|(f, m)| {
                    json!({
                        "label": vector(&f.source_label),
                        "target_label": vector(&f.target_label),
                        "weight": num(f.weight),
                        "cost": num(f.cost),
                        "source_atoms": f.source_atoms,
                        "target_atoms": f.target_atoms,
                        "couplings": plan_json(&f.plan),
                        "duals": duals_json(&f.duals),
                        "monotonicity": m.as_ref().map(monotonicity_json),
                    })
                })
                .collect();
            fields.insert("fiber_eps".into(), num(solution.eps));
            fields.insert("discrepancy".into(), num(solution.compatibility.discrepancy));
            fields.insert("fibers".into(), Value::Array(fibers));
            monotonicity.iter().flatten().all(|m| m.pass)
        }
    };
    out.write_json("solution.json", &doc)?;
    let header = ["i", "j", "mass"].map(String::from);
    out.write_csv(
        "plan.csv",
        &header,
        plan.couplings.iter().map(|c| vec![c.source.to_string(), c.target.to_string(), cell(c.mass)]),
    )?;
    Ok(format!(
        "total cost {} with {} couplings{}; monotonicity {}",
        cell(plan.total_cost),
        plan.couplings.len(),
        if plan.is_map { " (map)" } else { "" },
        if mono_summary { "pass" } else { "FAIL" }
    ))
}

pub fn sample(problem: &Problem, out: &OutputDir) -> Result<String, CliError> {
    let (mu0, mu1) = measures(problem)?;
    let n = problem.system.n();
    let header: Vec<String> = indexed("x", n).chain(std::iter::once("weight".to_string())).collect();
    for (name, mu) in [("source.csv", mu0), ("target.csv", mu1)] {
        let rows = mu
            .points()
            .iter()
            .zip(mu.weights())
            .map(|(p, &w)| p.iter().copied().chain(std::iter::once(w)).map(cell).collect());
        out.write_csv(name, &header, rows)?;
    }
    out.write_json(
        "measures.json",
        &json!({ "seed": problem.seed, "source": measure_json(mu0), "target": measure_json(mu1) }),
    )?;
    Ok(format!("source {} atoms, target {} atoms", mu0.len(), mu1.len()))
}
