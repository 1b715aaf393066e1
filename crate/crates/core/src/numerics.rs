//! Dense linear-algebra helpers and the adaptive Gauss-Legendre rule shared by
//! the cost synthesis and fiber modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest `|tM|_1` accepted by [`matrix_exponential`]; beyond this the
/// entries of `e^{tM}` may leave the range of an `f64`.
pub const EXPM_NORM_LIMIT: f64 = 700.0;

/// Relative stopping tolerance for panel doubling.
pub const QUADRATURE_RTOL: f64 = 1e-12;

const MAX_PANEL_LEVEL: u32 = 12;

// 10-point Gauss-Legendre rule on [-1, 1]; nodes come in symmetric pairs.
#[allow(clippy::excessive_precision)]
const GL_NODES: [f64; 5] = [
    0.148_874_338_981_631_210_884_826,
    0.433_395_394_129_247_190_799_266,
    0.679_409_568_299_024_406_234_327,
    0.865_063_366_688_984_510_732_097,
    0.973_906_528_517_171_720_077_964,
];
#[allow(clippy::excessive_precision)]
const GL_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_870_173_893,
    0.269_266_719_309_996_355_091_227,
    0.219_086_362_515_982_043_995_535,
    0.149_451_349_150_580_593_145_776,
    0.066_671_344_308_688_137_593_569,
];

/// `e^{tM}` by scaling and squaring with a Padé core.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch {
            field: "M".into(),
            expected: "square matrix".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scaled = m * t;
    let norm = norm_one(&scaled);
    if !norm.is_finite() || norm > EXPM_NORM_LIMIT {
        return Err(Error::Overflow { norm });
    }
    let out = scaled.exp();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow { norm });
    }
    Ok(out)
}

/// Maximum absolute column sum.
pub fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `|a - b|_F / max(1, |a|_F, |b|_F)`.
pub fn relative_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = 1.0_f64.max(a.norm()).max(b.norm());
    (a - b).norm() / scale
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn block(m: &DMatrix<f64>, r0: usize, c0: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    m.view((r0, c0), (rows, cols)).into_owned()
}

/// Splits a `2k x 2k` matrix into its four `k x k` blocks.
pub fn quarter(m: &DMatrix<f64>) -> [DMatrix<f64>; 4] {
    let k = m.nrows() / 2;
    [block(m, 0, 0, k, k), block(m, 0, k, k, k), block(m, k, 0, k, k), block(m, k, k, k, k)]
}

/// Integrates a vector-valued function over `[a, b]` with the composite
/// 10-point Gauss-Legendre rule, doubling the panel count until two successive
/// estimates agree to [`QUADRATURE_RTOL`].
///
/// The relative test is taken against the larger of the integral norm and the
/// integral of the integrand's norm, so integrands that cancel to zero still
/// terminate.
pub fn integrate<F>(mut f: F, a: f64, b: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    if a == b {
        let probe = f(a)?;
        return Ok(DVector::zeros(probe.len()));
    }
    let mut previous = composite_rule(&mut f, a, b, 1)?.0;
    let mut change = f64::INFINITY;
    for level in 1..=MAX_PANEL_LEVEL {
        let (current, mass) = composite_rule(&mut f, a, b, 1 << level)?;
        change = (&current - &previous).norm();
        let scale = current.norm().max(mass);
        if change <= QUADRATURE_RTOL * scale || change == 0.0 {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::QuadratureNotConverged { change })
}

/// Matrix-valued wrapper around [`integrate`].
pub fn integrate_matrix<F>(mut f: F, a: f64, b: f64, rows: usize, cols: usize) -> Result<DMatrix<f64>>
where
    F: FnMut(f64) -> Result<DMatrix<f64>>,
{
    let v = integrate(
        |t| {
            let m = f(t)?;
            Ok(DVector::from_column_slice(m.as_slice()))
        },
        a,
        b,
    )?;
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

fn composite_rule<F>(f: &mut F, a: f64, b: f64, panels: usize) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    let h = (b - a) / panels as f64;
    let half = 0.5 * h;
    let mut acc: Option<DVector<f64>> = None;
    let mut mass = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (&x, &w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            for t in [mid - half * x, mid + half * x] {
                let v = f(t)?;
                mass += w * half * v.norm();
                match acc.as_mut() {
                    Some(s) => s.axpy(w * half, &v, 1.0),
                    None => acc = Some(v * (w * half)),
                }
            }
        }
    }
    Ok((acc.unwrap_or_else(|| DVector::zeros(0)), mass.abs()))
}

/// Composite Simpson rule on a uniform grid; an odd interval count closes
/// with a 3/8 panel.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * h * (values[0] + values[1]),
        _ => {
            let even_end = if n.is_multiple_of(2) { n } else { n - 3 };
            let mut s = 0.0;
            let mut i = 0;
            while i < even_end {
                s += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
                i += 2;
            }
            if n % 2 == 1 {
                let j = even_end;
                s += 3.0 * h / 8.0 * (values[j] + 3.0 * values[j + 1] + 3.0 * values[j + 2] + values[j + 3]);
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_weights_sum_to_two() {
        let s: f64 = GL_WEIGHTS.iter().sum::<f64>() * 2.0;
        assert!((s - 2.0).abs() < 1e-15);
    }

    #[test]
    fn integrates_exponential() {
        let v = integrate(|t| Ok(DVector::from_element(1, (3.0 * t).exp())), 0.0, 1.0).unwrap();
        let exact = ((3.0f64).exp() - 1.0) / 3.0;
        assert!((v[0] - exact).abs() < 1e-13 * exact);
    }

    #[test]
    fn integrates_zero_function() {
        let v = integrate(|_| Ok(DVector::zeros(3)), 0.0, 1.0).unwrap();
        assert_eq!(v, DVector::zeros(3));
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        for n in [2usize, 3, 4, 7, 10] {
            let h = 1.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|i| (i as f64 * h).powi(3)).collect();
            assert!((simpson_uniform(&vals, h) - 0.25).abs() < 1e-14, "n={n}");
        }
    }

    #[test]
    fn exponential_of_zero_is_identity() {
        let e = matrix_exponential(&DMatrix::zeros(3, 3), 2.5).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn exponential_of_nilpotent_terminates() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&m, 1.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((e - expected).amax() < 1e-15);
    }

    #[test]
    fn exponential_rejects_huge_argument() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(matrix_exponential(&m, 1e4), Err(Error::Overflow { .. })));
    }

    #[test]
    fn exponential_rejects_rectangular() {
        let m = DMatrix::zeros(2, 3);
        assert!(matches!(matrix_exponential(&m, 1.0), Err(Error::ShapeMismatch { .. })));
    }
}
