//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes and returns JSON strings. The pure functions behind
//! them are public so they can be tested natively.

use lqot_core::density::DensityExpr;
use lqot_core::linsys::LinearQuadraticSystem;
use lqot_core::lqcost::{cost_matrices, optimal_trajectory, CostModel};
use lqot_core::transport::{
    cost_matrix, cyclical_monotonicity_check, sample_box, solve_discrete_ot, CycleOptions, SamplingBox,
};
use nalgebra::DVector;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest heatmap side and cloud size accepted from the page.
pub const MAX_RESOLUTION: usize = 200;
pub const MAX_ATOMS: usize = 400;

fn matrix_rows(value: &Value, key: &str) -> Result<Vec<Vec<f64>>, String> {
    serde_json::from_value(value.get(key).cloned().ok_or(format!("missing {key}"))?).map_err(|e| format!("{key}: {e}"))
}

/// A planar controllable system from `{"A", "B", "W", "U"}`.
pub fn planar_model(system: &str) -> Result<(LinearQuadraticSystem, CostModel), String> {
    let v: Value = serde_json::from_str(system).map_err(|e| e.to_string())?;
    let sys = LinearQuadraticSystem::from_rows(
        &matrix_rows(&v, "A")?,
        &matrix_rows(&v, "B")?,
        &matrix_rows(&v, "W")?,
        &matrix_rows(&v, "U")?,
    )
    .map_err(|e| e.to_string())?;
    if sys.n() != 2 {
        return Err(format!("the demo draws planar systems; got n = {}", sys.n()));
    }
    let model = cost_matrices(&sys).map_err(|e| e.to_string())?;
    Ok((sys, model))
}

fn point(x: f64, y: f64) -> DVector<f64> {
    DVector::from_column_slice(&[x, y])
}

/// `c(x, ·)` on a `resolution x resolution` grid over `[-extent, extent]²`,
/// row-major from the bottom-left corner.
pub fn cost_field(system: &str, x: [f64; 2], extent: f64, resolution: usize) -> Result<Value, String> {
    if !(2..=MAX_RESOLUTION).contains(&resolution) || !(extent > 0.0 && extent.is_finite()) {
        return Err("resolution must be in 2..=200 and extent positive".into());
    }
    let (_, model) = planar_model(system)?;
    let origin = point(x[0], x[1]);
    let step = 2.0 * extent / (resolution - 1) as f64;
    let mut values = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let y = point(-extent + j as f64 * step, -extent + i as f64 * step);
            values.push(model.eval(&origin, &y));
        }
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(json!({ "resolution": resolution, "extent": extent, "values": values, "min": min, "max": max }))
}

/// Optimal plan between two seeded Gaussian blobs centred at `from` and `to`.
pub fn solve_clouds(
    system: &str,
    atoms: usize,
    seed: u64,
    from: [f64; 2],
    to: [f64; 2],
    spread: f64,
) -> Result<Value, String> {
    if !(1..=MAX_ATOMS).contains(&atoms) || !(spread > 0.0 && spread.is_finite()) {
        return Err("atoms must be in 1..=400 and spread positive".into());
    }
    let (_, model) = planar_model(system)?;
    let blob = |c: [f64; 2], seed: u64| {
        let density =
            DensityExpr::parse(&format!("exp(-((x - ({}))^2 + (y - ({}))^2) / (2 * {spread}^2))", c[0], c[1]))
                .map_err(|e| e.to_string())?;
        let r = 3.0 * spread;
        let region = SamplingBox::new(&[[c[0] - r, c[0] + r], [c[1] - r, c[1] + r]]).map_err(|e| e.to_string())?;
        sample_box(&density, &region, atoms, seed).map_err(|e| e.to_string())
    };
    let mu0 = blob(from, seed)?;
    let mu1 = blob(to, seed.wrapping_add(1))?;
    let c = cost_matrix(|x, y| model.eval(x, y), &mu0, &mu1).map_err(|e| e.to_string())?;
    let (plan, _) = solve_discrete_ot(&c, &mu0, &mu1).map_err(|e| e.to_string())?;
    let cert = cyclical_monotonicity_check(
        &plan,
        &mu0,
        &mu1,
        &model.e,
        CycleOptions { random_cycles: 2000, ..CycleOptions::default() },
    );
    let pts = |m: &lqot_core::transport::DiscreteMeasure| m.points().iter().map(|p| [p[0], p[1]]).collect::<Vec<_>>();
    Ok(json!({
        "source": pts(&mu0),
        "target": pts(&mu1),
        "couplings": plan.couplings.iter().map(|c| json!([c.source, c.target, c.mass])).collect::<Vec<_>>(),
        "total_cost": plan.total_cost,
        "is_map": plan.is_map,
        "monotone": cert.pass,
    }))
}

/// Optimal path from `x` to `y` sampled at `samples + 1` times.
pub fn trajectory(system: &str, x: [f64; 2], y: [f64; 2], samples: usize) -> Result<Value, String> {
    if !(2..=2000).contains(&samples) {
        return Err("samples must be in 2..=2000".into());
    }
    let (sys, model) = planar_model(system)?;
    let traj =
        optimal_trajectory(&sys, &model, &point(x[0], x[1]), &point(y[0], y[1]), samples).map_err(|e| e.to_string())?;
    Ok(json!({
        "t": traj.times,
        "x": traj.states.iter().map(|s| [s[0], s[1]]).collect::<Vec<_>>(),
        "u": traj.controls.iter().map(|u| u.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "cost": model.eval(&point(x[0], x[1]), &point(y[0], y[1])),
        "running_cost": traj.running_cost,
    }))
}

fn js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = costField)]
pub fn cost_field_js(system: &str, x1: f64, x2: f64, extent: f64, resolution: usize) -> Result<String, JsValue> {
    js(cost_field(system, [x1, x2], extent, resolution))
}

#[wasm_bindgen(js_name = solveClouds)]
#[allow(clippy::too_many_arguments)]
pub fn solve_clouds_js(
    system: &str,
    atoms: usize,
    seed: u64,
    fx: f64,
    fy: f64,
    tx: f64,
    ty: f64,
    spread: f64,
) -> Result<String, JsValue> {
    js(solve_clouds(system, atoms, seed, [fx, fy], [tx, ty], spread))
}

#[wasm_bindgen(js_name = trajectory)]
pub fn trajectory_js(system: &str, x1: f64, x2: f64, y1: f64, y2: f64, samples: usize) -> Result<String, JsValue> {
    js(trajectory(system, [x1, x2], [y1, y2], samples))
}
