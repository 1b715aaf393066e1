use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lqot_core::linsys::LinearQuadraticSystem;
use lqot_core::lqcost::cost_matrices;
use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn lqot(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqot"))
        .arg(verb)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

const EUCLIDEAN: &str = r#"{"system": {"A": [[0,0],[0,0]], "B": [[1,0],[0,1]], "W": [[0,0],[0,0]], "U": [[1,0],[0,1]]},
  "pairs": [{"x": [0,0], "y": [1,0]}]"#;

fn euclidean_with(rest: &str) -> String {
    format!("{EUCLIDEAN}{rest}}}")
}

#[test]
fn analyze_euclidean_reports_identity_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &euclidean_with(""));
    let out = lqot("analyze", &cfg, &dir.path().join("out"), &[]);
    assert!(out.status.success());
    let doc = json(dir.path().join("out/analyze.json"));
    assert_eq!(doc["controllability"]["rank"], 2);
    for key in ["D", "E", "F"] {
        let m = &doc["cost"][key];
        for i in 0..2 {
            for j in 0..2 {
                assert!((f(&m[i][j]) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn analyze_reports_blocks_for_partial_rank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"system": {"A": [[1,0],[0,1]], "B": [[1],[0]], "W": [[0,0],[0,0]], "U": [[1]]}}"#,
    );
    assert!(lqot("analyze", &cfg, &dir.path().join("out"), &[]).status.success());
    let doc = json(dir.path().join("out/analyze.json"));
    assert_eq!(doc["controllability"]["rank"], 1);
    assert!(doc["controllability"]["blocks"].is_object());
    assert!(doc["cost"].is_null());
    assert!(doc["reduced"].is_object());
}

#[test]
fn configuration_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"system": {"A": [[0,1],[0]], "B": [[1],[1]], "W": [[0,0],[0,0]], "U": [[1]]}}"#, "system"),
        (r#"{"system": {"A": [[0]], "B": [[1]], "W": [[0]], "U": [[-1]]}}"#, "system"),
        (r#"{"system": {"A": [[0]], "B": [[1]], "W": [[0]], "U": [[1]], "bogus": 1}}"#, "system"),
        (r#"{"system": {"A": [[0]], "B": [[1]], "W": [[0]], "U": [[1]]}, "options": {"tol": 1.0}}"#, "options.tol"),
        (
            r#"{"system": {"A": [[0]], "B": [[1]], "W": [[0]], "U": [[1]]}, "pairs": [{"x": [0, 1], "y": [0]}]}"#,
            "pairs[0].x",
        ),
        (
            r#"{"system": {"A": [[0]], "B": [[1]], "W": [[0]], "U": [[1]]},
               "measures": {"source": {"density": "exp(", "box": [[0,1]], "count": 3}, "target": {"points": [[0]]}}}"#,
            "measures.source.density",
        ),
    ];
    for (k, (text, field)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{k}.json"), text);
        let out = lqot("analyze", &cfg, &dir.path().join("out"), &[]);
        assert_eq!(out.status.code(), Some(2), "case {k}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(field), "case {k}: {err}");
    }
    let cfg = write_config(dir.path(), "ok.json", &euclidean_with(""));
    assert_eq!(lqot("analyze", &cfg, &dir.path().join("out"), &["--tol", "1e-20"]).status.code(), Some(2));
    assert_eq!(lqot("analyze", &dir.path().join("missing.json"), &dir.path().join("out"), &[]).status.code(), Some(2));
}

#[test]
fn cost_values_and_off_fiber_marker() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &euclidean_with(""));
    assert!(lqot("cost", &cfg, &dir.path().join("e"), &[]).status.success());
    assert!((f(&json(dir.path().join("e/cost.json"))["pairs"][0]["cost"]) - 0.5).abs() < 1e-12);

    let cfg = workspace().join("configs/double_integrator.json");
    assert!(lqot("cost", &cfg, &dir.path().join("d"), &[]).status.success());
    let doc = json(dir.path().join("d/cost.json"));
    assert!((f(&doc["pairs"][0]["cost"]) - 6.0).abs() < 1e-8);

    let cfg = workspace().join("configs/fibered.json");
    assert!(lqot("cost", &cfg, &dir.path().join("f"), &[]).status.success());
    let doc = json(dir.path().join("f/cost.json"));
    assert!(doc["pairs"][0]["cost"].is_number());
    assert_eq!(doc["pairs"][1]["cost"], "+inf");
    assert!(doc["pairs"][1]["p0"].is_null());
}

#[test]
fn trajectory_csv_has_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/double_integrator.json");
    assert!(lqot("trajectory", &cfg, &dir.path().join("t"), &[]).status.success());
    let text = fs::read_to_string(dir.path().join("t/trajectory_0.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x1,x2,p1,p2,u1"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 101);
    // u(t) = 6 - 12 t.
    for r in &rows {
        assert!((r[5] - (6.0 - 12.0 * r[0])).abs() < 1e-9);
    }
    assert!((rows[100][1] - 1.0).abs() < 1e-9 && rows[100][2].abs() < 1e-9);
}

#[test]
fn dirac_to_dirac_is_one_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &euclidean_with(r#", "measures": {"source": {"points": [[1,2]]}, "target": {"points": [[4,6]]}}"#),
    );
    assert!(lqot("solve", &cfg, &dir.path().join("out"), &[]).status.success());
    let doc = json(dir.path().join("out/solution.json"));
    assert_eq!(doc["couplings"].as_array().unwrap().len(), 1);
    assert!((f(&doc["total_cost"]) - 12.5).abs() < 1e-12);
    let csv = fs::read_to_string(dir.path().join("out/plan.csv")).unwrap();
    assert_eq!(csv, "i,j,mass\n0,0,1.0\n");
}

#[test]
fn generic_uniform_instance_gives_map_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/euclidean.json");
    assert!(lqot("solve", &cfg, &dir.path().join("out"), &[]).status.success());
    let doc = json(dir.path().join("out/solution.json"));
    assert_eq!(doc["is_map"], true);
    assert_eq!(doc["map"].as_array().unwrap().len(), 5);
    assert_eq!(doc["monotonicity"]["pass"], true);
}

#[test]
fn plan_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/sampled.json");
    assert!(lqot("solve", &cfg, &dir.path().join("out"), &[]).status.success());
    let doc = json(dir.path().join("out/solution.json"));
    let points = |side: &str| -> Vec<nalgebra::DVector<f64>> {
        doc[side]["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| nalgebra::DVector::from_iterator(2, p.as_array().unwrap().iter().map(f)))
            .collect()
    };
    let (xs, ys) = (points("source"), points("target"));
    let sys = LinearQuadraticSystem::from_rows(
        &[vec![0.0, 1.0], vec![-1.0, -0.2]],
        &[vec![0.0], vec![1.0]],
        &[vec![0.5, 0.0], vec![0.0, 0.1]],
        &[vec![1.0]],
    )
    .unwrap();
    let model = cost_matrices(&sys).unwrap();
    let csv = fs::read_to_string(dir.path().join("out/plan.csv")).unwrap();
    let mut total = 0.0;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let (i, j, mass): (usize, usize, f64) =
            (cells[0].parse().unwrap(), cells[1].parse().unwrap(), cells[2].parse().unwrap());
        total += mass * model.eval(&xs[i], &ys[j]);
    }
    assert!((total - f(&doc["total_cost"])).abs() <= 1e-12 * (1.0 + total.abs()));
}

#[test]
fn incompatible_fibers_exit_3_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"system": {"A": [[0,0],[0,0]], "B": [[1],[0]], "W": [[0,0],[0,0]], "U": [[1]]},
            "measures": {"source": {"points": [[0,0],[0,1]]}, "target": {"points": [[1,0],[1,2]]}}}"#,
    );
    let out = lqot("solve", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("discrepancy"));
    let doc = json(dir.path().join("out/incompatibility.json"));
    assert!((f(&doc["discrepancy"]) - 0.5).abs() < 1e-12);
}

#[test]
fn numerical_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"system": {"A": [[900]], "B": [[1]], "W": [[0]], "U": [[1]]}, "pairs": [{"x": [0], "y": [1]}]}"#,
    );
    assert_eq!(lqot("cost", &cfg, &dir.path().join("out"), &[]).status.code(), Some(4));
}

#[test]
fn check_suite_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/double_integrator.json");
    let out = lqot("check", &cfg, &dir.path().join("a"), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = json(dir.path().join("a/check.json"));
    assert_eq!(doc["pass"], true);

    // An unreachable tolerance makes the quadrature comparison fail.
    let cfg = workspace().join("configs/sampled.json");
    let out = lqot("check", &cfg, &dir.path().join("b"), &["--tol", "1e-15"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(dir.path().join("b/check.json"))["pass"], false);
}

#[test]
fn seed_override_changes_samples_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/sampled.json");
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        assert!(lqot("sample", &cfg, &dir.path().join(name), &["--seed", seed]).status.success());
    }
    let read = |n: &str| fs::read(dir.path().join(n).join("source.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn usage_errors_exit_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_lqot")).arg("solve").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
