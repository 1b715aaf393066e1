//! Linear control systems `x' = Ax + Bu` with quadratic Lagrangian
//! `L(x, u) = ½<x, Wx> + ½<u, Uu>`, controllability analysis and the Kalman
//! decomposition into a controllable block and an autonomous block.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{asymmetry, block, matrix_exponential, symmetric_eigen_range, symmetrize};

/// Relative singular-value cutoff for the numerical rank of the Kalman matrix.
pub const TOL_RANK: f64 = 1e-10;
/// Relative eigenvalue floor below which `W` is rejected as indefinite.
pub const TOL_PSD: f64 = 1e-10;
/// Relative floor on the smallest eigenvalue of `U`.
pub const TOL_PD: f64 = 1e-12;
/// Relative tolerance for the symmetry of `W` and `U`.
pub const TOL_SYMMETRY: f64 = 1e-10;
/// Residual tolerance for the block-triangular form.
pub const TOL_DECOMP: f64 = 1e-10;
/// Relative tolerance used by [`reachable_target`].
pub const TOL_REACH: f64 = 1e-8;

/// A validated control system together with its Lagrangian weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuadraticSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DMatrix<f64>,
    u_inv: DMatrix<f64>,
}

impl LinearQuadraticSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, w: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        validate_system(a, b, w, u)
    }

    /// Builds a system from row-major nested arrays.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>], w: &[Vec<f64>], u: &[Vec<f64>]) -> Result<Self> {
        validate_system(
            matrix_from_rows("A", a)?,
            matrix_from_rows("B", b)?,
            matrix_from_rows("W", w)?,
            matrix_from_rows("U", u)?,
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn u_inv(&self) -> &DMatrix<f64> {
        &self.u_inv
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `B U^{-1} B^T`.
    pub fn input_weight(&self) -> DMatrix<f64> {
        &self.b * &self.u_inv * self.b.transpose()
    }

    pub fn lagrangian(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w * x)) + 0.5 * u.dot(&(&self.u * u))
    }

    pub fn controllability(&self) -> ControllabilityReport {
        kalman_decomposition(&self.a, &self.b)
    }

    pub fn is_controllable(&self) -> bool {
        controllability_subspace(&self.a, &self.b).is_controllable
    }
}

/// Converts row-major nested arrays, reporting ragged rows by field path.
pub fn matrix_from_rows(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::ShapeMismatch {
                field: format!("{field}[{i}]"),
                expected: format!("{ncols} columns"),
                found: format!("{} columns", row.len()),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Checks the hypotheses on `(A, B, W, U)`: consistent shapes, `W` symmetric
/// non-negative and `U` symmetric positive definite.
pub fn validate_system(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DMatrix<f64>,
) -> Result<LinearQuadraticSystem> {
    let n = a.nrows();
    let m = b.ncols();
    let shape = |field: &str, mat: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
        if mat.nrows() != r || mat.ncols() != c {
            return Err(Error::ShapeMismatch {
                field: field.into(),
                expected: format!("{r}x{c}"),
                found: format!("{}x{}", mat.nrows(), mat.ncols()),
            });
        }
        Ok(())
    };
    if n == 0 {
        return Err(Error::ShapeMismatch { field: "A".into(), expected: "n >= 1".into(), found: "0x0".into() });
    }
    shape("A", &a, n, n)?;
    shape("B", &b, n, m)?;
    if m == 0 {
        return Err(Error::ShapeMismatch {
            field: "B".into(),
            expected: "m >= 1 columns".into(),
            found: "0 columns".into(),
        });
    }
    shape("W", &w, n, n)?;
    shape("U", &u, m, m)?;
    for (field, mat) in [("A", &a), ("B", &b), ("W", &w), ("U", &u)] {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: field.into() });
        }
    }

    for (field, mat) in [("W", &w), ("U", &u)] {
        if asymmetry(mat) > TOL_SYMMETRY * mat.amax().max(1.0) {
            return Err(Error::NonSymmetric(field.into()));
        }
    }
    let w = symmetrize(&w);
    let u = symmetrize(&u);

    let (w_min, w_max) = symmetric_eigen_range(&w);
    if w_min < -TOL_PSD * w_min.abs().max(w_max.abs()) {
        return Err(Error::NotPositiveSemidefinite("W".into()));
    }
    let (u_min, u_max) = symmetric_eigen_range(&u);
    if u_min <= TOL_PD * u_max.abs() || u_min <= 0.0 {
        return Err(Error::NotPositiveDefinite("U".into()));
    }
    let u_inv = u.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("U".into()))?.inverse();

    Ok(LinearQuadraticSystem { a, b, w, u, u_inv })
}

/// Blocks of the system in Kalman coordinates `x~ = P x`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBlocks {
    /// `d x d` controllable drift.
    pub a1: DMatrix<f64>,
    /// `(n-d) x (n-d)` uncontrolled drift.
    pub a2: DMatrix<f64>,
    /// `d x (n-d)` coupling.
    pub a3: DMatrix<f64>,
    /// `d x m` input.
    pub b1: DMatrix<f64>,
    /// Largest entry of the blocks that must vanish (lower-left of `PAP^T`
    /// and lower part of `PB`).
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllabilityReport {
    /// `dim V`.
    pub rank: usize,
    /// Orthonormal `n x d` basis of the controllable subspace.
    pub basis: DMatrix<f64>,
    pub is_controllable: bool,
    /// Orthogonal change of coordinates; the first `rank` rows span `V`.
    pub transform: DMatrix<f64>,
    /// Singular values of the Kalman matrix, descending.
    pub singular_values: Vec<f64>,
    /// Present when `rank < n`.
    pub blocks: Option<KalmanBlocks>,
}

impl ControllabilityReport {
    pub fn n(&self) -> usize {
        self.transform.nrows()
    }

    /// Coordinates `(x1, x2) = P x`.
    pub fn to_kalman(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let xt = &self.transform * x;
        let d = self.rank;
        (xt.rows(0, d).into_owned(), xt.rows(d, self.n() - d).into_owned())
    }

    pub fn from_kalman(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        let mut xt = DVector::zeros(self.n());
        xt.rows_mut(0, x1.len()).copy_from(x1);
        xt.rows_mut(x1.len(), x2.len()).copy_from(x2);
        self.transform.transpose() * xt
    }

    /// Fiber label `x2` of a state.
    pub fn fiber_projection(&self, x: &DVector<f64>) -> DVector<f64> {
        self.to_kalman(x).1
    }
}

/// `[B, AB, ..., A^{n-1} B]`.
pub fn kalman_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut k = DMatrix::zeros(n, n * m);
    let mut power = b.clone();
    for i in 0..n {
        k.view_mut((0, i * m), (n, m)).copy_from(&power);
        power = a * power;
    }
    k
}

/// Numerical rank and orthonormal basis of `Span{B, AB, ..., A^{n-1}B}`.
pub fn controllability_subspace(a: &DMatrix<f64>, b: &DMatrix<f64>) -> ControllabilityReport {
    let n = a.nrows();
    let k = kalman_matrix(a, b);
    let (q, sv) = ordered_left_singular_vectors(&k);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let rank = if sigma_max == 0.0 { 0 } else { sv.iter().filter(|&&s| s > TOL_RANK * sigma_max).count() };
    ControllabilityReport {
        rank,
        basis: q.columns(0, rank).into_owned(),
        is_controllable: rank == n,
        transform: q.transpose(),
        singular_values: sv,
        blocks: None,
    }
}

/// Controllability report including the block-triangular form of
/// `(PAP^T, PB)` when the system is not controllable.
pub fn kalman_decomposition(a: &DMatrix<f64>, b: &DMatrix<f64>) -> ControllabilityReport {
    let mut report = controllability_subspace(a, b);
    let n = a.nrows();
    let d = report.rank;
    if d < n {
        let p = &report.transform;
        let at = p * a * p.transpose();
        let bt = p * b;
        let lower_left = block(&at, d, 0, n - d, d);
        let lower_b = block(&bt, d, 0, n - d, bt.ncols());
        let residual = lower_left.amax().max(lower_b.amax());
        report.blocks = Some(KalmanBlocks {
            a1: block(&at, 0, 0, d, d),
            a2: block(&at, d, d, n - d, n - d),
            a3: block(&at, 0, d, d, n - d),
            b1: block(&bt, 0, 0, d, bt.ncols()),
            residual,
        });
    }
    report
}

/// Whether `y` can be reached from `x` in unit time, i.e. `e^A x - y` lies in
/// the controllable subspace.
pub fn reachable_target(
    a: &DMatrix<f64>,
    report: &ControllabilityReport,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<bool> {
    if report.is_controllable {
        return Ok(true);
    }
    let r = matrix_exponential(a, 1.0)? * x - y;
    let v = &report.basis;
    let orth = &r - v * (v.transpose() * &r);
    Ok(orth.norm() <= TOL_REACH * (1.0 + r.norm()))
}

/// Left singular vectors of `k` (all `n` of them) sorted by decreasing
/// singular value, each column signed so its largest entry is positive.
fn ordered_left_singular_vectors(k: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = k.nrows();
    if k.amax() == 0.0 {
        return (DMatrix::identity(n, n), vec![0.0; n]);
    }
    let svd = k.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..u.ncols()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let mut q = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate().take(n) {
        let mut col = u.column(src).into_owned();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 + 1e-12 { (i, v.abs()) } else { acc })
            .0;
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        q.set_column(dst, &col);
        values.push(sv[src]);
    }
    (q, values)
}
