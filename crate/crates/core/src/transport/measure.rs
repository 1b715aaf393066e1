use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::DensityExpr;
use crate::error::{Error, Result};

/// Atoms closer than this (max-norm) are merged.
pub const DUPLICATE_TOL: f64 = 1e-12;

/// A finitely supported probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn dirac(point: DVector<f64>) -> Self {
        DiscreteMeasure { points: vec![point], weights: vec![1.0] }
    }

    /// `∫ f dμ`.
    pub fn integrate<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (p, w) in self.points.iter().zip(&self.weights) {
            m.axpy(*w, p, 1.0);
        }
        m
    }
}

/// Normalized, deduplicated measure. Zero-weight atoms are dropped.
pub fn make_measure(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<DiscreteMeasure> {
    make_measure_indexed(points, weights).map(|(m, _)| m)
}

/// As [`make_measure`], also returning for every input atom the index of the
/// atom it ended up in (`None` for dropped zero-weight atoms).
pub fn make_measure_indexed(
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
) -> Result<(DiscreteMeasure, Vec<Option<usize>>)> {
    if points.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            field: "weights".into(),
            expected: format!("{} entries", points.len()),
            found: format!("{} entries", weights.len()),
        });
    }
    for (index, &weight) in weights.iter().enumerate() {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::NegativeWeight { index, weight });
        }
    }
    if let Some(dim) = points.first().map(|p| p.len()) {
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::ShapeMismatch {
                field: format!("points[{i}]"),
                expected: format!("{dim} coordinates"),
                found: format!("{} coordinates", p.len()),
            });
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { field: format!("points[{i}]") });
        }
    }

    let live: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
    if live.is_empty() {
        return Err(Error::EmptyMeasure);
    }

    // Sweep in order of the first coordinate; candidates for merging lie in a
    // window of width DUPLICATE_TOL.
    let mut order = live.clone();
    order.sort_by(|&i, &j| points[i][0].total_cmp(&points[j][0]).then(i.cmp(&j)));
    let mut representative: Vec<Option<usize>> = vec![None; points.len()];
    for (k, &i) in order.iter().enumerate() {
        let mut found = None;
        for &j in order[..k].iter().rev() {
            if points[i][0] - points[j][0] > DUPLICATE_TOL {
                break;
            }
            if representative[j] == Some(j) && (&points[i] - &points[j]).amax() <= DUPLICATE_TOL {
                found = Some(j);
            }
        }
        representative[i] = Some(found.unwrap_or(i));
    }

    // Atoms keep the order of first appearance in the input.
    let mut atom_of_rep = vec![usize::MAX; points.len()];
    let mut out_points = Vec::new();
    let mut out_weights: Vec<f64> = Vec::new();
    let mut index = vec![None; points.len()];
    for &i in &live {
        let rep = representative[i].expect("live atom assigned");
        let rep_first = live.iter().copied().find(|&j| representative[j] == Some(rep)).expect("rep has members");
        if atom_of_rep[rep] == usize::MAX {
            atom_of_rep[rep] = out_points.len();
            out_points.push(points[rep_first].clone());
            out_weights.push(0.0);
        }
        out_weights[atom_of_rep[rep]] += weights[i];
        index[i] = Some(atom_of_rep[rep]);
    }
    let total: f64 = out_weights.iter().sum();
    for w in &mut out_weights {
        *w /= total;
    }
    Ok((DiscreteMeasure { points: out_points, weights: out_weights }, index))
}

/// Axis-aligned box `[lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SamplingBox {
    pub fn new(bounds: &[[f64; 2]]) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::ShapeMismatch {
                field: "box".into(),
                expected: "at least one interval".into(),
                found: "0".into(),
            });
        }
        for (k, [lo, hi]) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::ShapeMismatch {
                    field: format!("box[{k}]"),
                    expected: "finite interval with lo <= hi".into(),
                    found: format!("[{lo}, {hi}]"),
                });
            }
        }
        Ok(SamplingBox { lower: bounds.iter().map(|b| b[0]).collect(), upper: bounds.iter().map(|b| b[1]).collect() })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
    }
}

const ENVELOPE_PROBES: usize = 4096;
const ENVELOPE_MARGIN: f64 = 1.25;
const MAX_REJECTIONS_PER_SAMPLE: usize = 100_000;

/// Draws `count` i.i.d. points from the density restricted to the box by
/// rejection against a probed envelope; weights are uniform.
pub fn sample_box(density: &DensityExpr, region: &SamplingBox, count: usize, seed: u64) -> Result<DiscreteMeasure> {
    if count == 0 {
        return Err(Error::EmptyMeasure);
    }
    if density.arity() > region.dim() {
        return Err(Error::ShapeMismatch {
            field: "density".into(),
            expected: format!("at most {} coordinates", region.dim()),
            found: format!("x{}", density.arity()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envelope: f64 = 0.0;
    for _ in 0..ENVELOPE_PROBES {
        let p = region.draw(&mut rng);
        let f = density.eval(&p);
        if f < 0.0 || f.is_nan() {
            return Err(Error::InvalidExpression {
                message: format!("density is negative or undefined at {p:?}"),
                position: 0,
            });
        }
        envelope = envelope.max(f);
    }
    if !envelope.is_finite() || envelope <= 0.0 {
        return Err(Error::ZeroDensity);
    }
    envelope *= ENVELOPE_MARGIN;

    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS_PER_SAMPLE {
            let p = region.draw(&mut rng);
            if rng.random::<f64>() * envelope < density.eval(&p) {
                accepted = Some(p);
                break;
            }
        }
        match accepted {
            Some(p) => points.push(DVector::from_vec(p)),
            None => return Err(Error::ZeroDensity),
        }
    }
    let weights = vec![1.0; count];
    make_measure(points, weights)
}

/// Image of the measure under `x -> Mx + b`.
pub fn pushforward(measure: &DiscreteMeasure, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DiscreteMeasure> {
    pushforward_indexed(measure, m, b).map(|(mu, _)| mu)
}

/// Pushforward plus, for every source atom, the index of its image atom.
pub fn pushforward_indexed(
    measure: &DiscreteMeasure,
    m: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DiscreteMeasure, Vec<usize>)> {
    if m.ncols() != measure.dim() || m.nrows() != b.len() {
        return Err(Error::ShapeMismatch {
            field: "map".into(),
            expected: format!("{}x{} matrix and {}-vector", b.len(), measure.dim(), m.nrows()),
            found: format!("{}x{} matrix and {}-vector", m.nrows(), m.ncols(), b.len()),
        });
    }
    let images = measure.points().iter().map(|p| m * p + b).collect();
    let (mu, index) = make_measure_indexed(images, measure.weights().to_vec())?;
    Ok((mu, index.into_iter().map(|i| i.expect("weights are positive")).collect()))
}
