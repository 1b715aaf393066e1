//! Problem configuration: a single JSON document holding the system, the two
//! marginals, explicit endpoint pairs and solver options.

use std::path::Path;

use lqot_core::density::DensityExpr;
use lqot_core::linsys::LinearQuadraticSystem;
use lqot_core::transport::{make_measure, sample_box, DiscreteMeasure, SamplingBox, SolverOptions};
use nalgebra::DVector;
use serde::Deserialize;

use crate::CliError;

/// Admissible range for every tolerance override.
pub const TOL_RANGE: [f64; 2] = [1e-15, 1e-2];

pub const DEFAULT_TRAJECTORY_INTERVALS: usize = 200;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub measures: Option<MeasuresConfig>,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: OptionsConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuresConfig {
    pub source: MeasureSpec,
    pub target: MeasureSpec,
}

/// Either inline atoms (`points`, optional `weights`, uniform by default) or
/// a sampling spec (`density`, `box`, `count`, optional `seed`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub points: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub density: Option<String>,
    #[serde(rename = "box")]
    pub bounds: Option<Vec<[f64; 2]>>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsConfig {
    pub tol: Option<f64>,
    pub fiber_eps: Option<f64>,
    pub max_iterations: Option<usize>,
    pub trajectory_intervals: Option<usize>,
    pub oracle_pieces: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Options {
    pub tol: Option<f64>,
    pub fiber_eps: Option<f64>,
    pub solver: SolverOptions,
    pub trajectory_intervals: usize,
    pub oracle_pieces: Vec<usize>,
}

/// A validated problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub system: LinearQuadraticSystem,
    pub measures: Option<(DiscreteMeasure, DiscreteMeasure)>,
    pub pairs: Vec<(DVector<f64>, DVector<f64>)>,
    pub seed: u64,
    pub options: Options,
}

pub fn check_tolerance(field: &str, value: f64) -> Result<f64, String> {
    if value.is_finite() && (TOL_RANGE[0]..=TOL_RANGE[1]).contains(&value) {
        Ok(value)
    } else {
        Err(format!("{field}: {value} is outside [{:e}, {:e}]", TOL_RANGE[0], TOL_RANGE[1]))
    }
}

/// Parses the JSON text; diagnostics carry the field path and position.
pub fn parse(text: &str) -> Result<ProblemConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        CliError::Config(format!("{path}: {inner}"))
    })
}

pub fn read(path: &Path) -> Result<ProblemConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

fn config_err(field: &str) -> impl Fn(lqot_core::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{field}: {e}"))
}

impl ProblemConfig {
    /// Validates everything and samples the measures. `seed` overrides the
    /// config seed and every per-measure seed.
    pub fn load(&self, seed: Option<u64>, tol: Option<f64>) -> Result<Problem, CliError> {
        let s = &self.system;
        let system = LinearQuadraticSystem::from_rows(&s.a, &s.b, &s.w, &s.u).map_err(config_err("system"))?;
        let n = system.n();

        let options = self.options.validate(tol)?;
        let base_seed = seed.unwrap_or(self.seed);
        let measures = match &self.measures {
            None => None,
            Some(m) => {
                let pick = |own: Option<u64>, offset: u64| match seed {
                    Some(_) => base_seed.wrapping_add(offset),
                    None => own.unwrap_or(base_seed.wrapping_add(offset)),
                };
                let source = m.source.build("measures.source", n, pick(m.source.seed, 0))?;
                let target = m.target.build("measures.target", n, pick(m.target.seed, 1))?;
                Some((source, target))
            }
        };

        let mut pairs = Vec::with_capacity(self.pairs.len());
        for (k, p) in self.pairs.iter().enumerate() {
            for (name, v) in [("x", &p.x), ("y", &p.y)] {
                if v.len() != n {
                    return Err(CliError::Config(format!(
                        "pairs[{k}].{name}: expected {n} entries, found {}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(CliError::Config(format!("pairs[{k}].{name}: non-finite entry")));
                }
            }
            pairs.push((DVector::from_column_slice(&p.x), DVector::from_column_slice(&p.y)));
        }
        Ok(Problem { system, measures, pairs, seed: base_seed, options })
    }
}

impl OptionsConfig {
    fn validate(&self, tol_override: Option<f64>) -> Result<Options, CliError> {
        let tol = match tol_override.or(self.tol) {
            Some(t) => Some(check_tolerance("options.tol", t).map_err(CliError::Config)?),
            None => None,
        };
        let fiber_eps = match self.fiber_eps {
            Some(t) => Some(check_tolerance("options.fiber_eps", t).map_err(CliError::Config)?),
            None => None,
        };
        let trajectory_intervals = self.trajectory_intervals.unwrap_or(DEFAULT_TRAJECTORY_INTERVALS);
        if trajectory_intervals < 2 {
            return Err(CliError::Config("options.trajectory_intervals: must be at least 2".into()));
        }
        let oracle_pieces = self.oracle_pieces.clone().unwrap_or_else(|| vec![4, 8, 16, 32, 64]);
        if oracle_pieces.is_empty() || oracle_pieces.contains(&0) || oracle_pieces.iter().any(|&k| k > 4096) {
            return Err(CliError::Config(
                "options.oracle_pieces: need a non-empty list of piece counts in 1..=4096".into(),
            ));
        }
        Ok(Options {
            tol,
            fiber_eps,
            solver: SolverOptions { max_iterations: self.max_iterations },
            trajectory_intervals,
            oracle_pieces,
        })
    }
}

impl MeasureSpec {
    fn build(&self, field: &str, n: usize, seed: u64) -> Result<DiscreteMeasure, CliError> {
        match (&self.points, &self.density) {
            (Some(points), None) => {
                if self.bounds.is_some() || self.count.is_some() || self.seed.is_some() {
                    return Err(CliError::Config(format!("{field}: inline atoms take no box, count or seed")));
                }
                for (i, p) in points.iter().enumerate() {
                    if p.len() != n {
                        return Err(CliError::Config(format!(
                            "{field}.points[{i}]: expected {n} entries, found {}",
                            p.len()
                        )));
                    }
                }
                let weights = self.weights.clone().unwrap_or_else(|| vec![1.0; points.len()]);
                let points = points.iter().map(|p| DVector::from_column_slice(p)).collect();
                make_measure(points, weights).map_err(config_err(field))
            }
            (None, Some(density)) => {
                if self.weights.is_some() {
                    return Err(CliError::Config(format!("{field}: sampled measures take no weights")));
                }
                let expr = DensityExpr::parse(density).map_err(config_err(&format!("{field}.density")))?;
                let bounds = self.bounds.as_ref().ok_or_else(|| CliError::Config(format!("{field}.box: missing")))?;
                if bounds.len() != n {
                    return Err(CliError::Config(format!(
                        "{field}.box: expected {n} intervals, found {}",
                        bounds.len()
                    )));
                }
                if expr.arity() > n {
                    return Err(CliError::Config(format!(
                        "{field}.density: uses x{} but the state has {n} coordinates",
                        expr.arity()
                    )));
                }
                let count = self.count.ok_or_else(|| CliError::Config(format!("{field}.count: missing")))?;
                if count == 0 {
                    return Err(CliError::Config(format!("{field}.count: must be positive")));
                }
                let region = SamplingBox::new(bounds).map_err(config_err(&format!("{field}.box")))?;
                sample_box(&expr, &region, count, seed).map_err(config_err(field))
            }
            (Some(_), Some(_)) => Err(CliError::Config(format!("{field}: give either points or density, not both"))),
            (None, None) => Err(CliError::Config(format!("{field}: needs points or density"))),
        }
    }
}
