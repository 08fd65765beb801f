//! Grid discretization of L² spaces on compact intervals.
//!
//! Functions are value vectors on a [`TimeGrid`]; integral operators are
//! kernel matrices whose action always threads the quadrature weights of the
//! column grid, so `(K f)(s) = Σ_t K(s, t) w_t f(t)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{FgccaError, Result};

/// Relative tolerance used when checking that two grids coincide.
const GRID_MATCH_TOL: f64 = 1e-12;

/// Default number of points per process interval.
pub const DEFAULT_GRID_SIZE: usize = 51;

/// Trapezoid quadrature weights for a strictly increasing point sequence.
pub fn trapezoid_weights(points: &[f64]) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(FgccaError::InvalidGrid(format!("need at least 2 points, got {n}")));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(FgccaError::InvalidGrid("non-finite grid point".into()));
    }
    if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
        return Err(FgccaError::InvalidGrid(format!(
            "points not strictly increasing at index {}",
            k + 1
        )));
    }
    let mut w = vec![0.0; n];
    w[0] = (points[1] - points[0]) / 2.0;
    w[n - 1] = (points[n - 1] - points[n - 2]) / 2.0;
    for k in 1..n - 1 {
        w[k] = (points[k + 1] - points[k - 1]) / 2.0;
    }
    Ok(w)
}

/// Discretization of a compact interval with trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let weights = trapezoid_weights(&points)?;
        Ok(Self { points, weights })
    }

    /// `n` equally spaced points covering `[lower, upper]`.
    pub fn uniform(lower: f64, upper: f64, n: usize) -> Result<Self> {
        if n < 2 || !(upper > lower) {
            return Err(FgccaError::InvalidGrid(format!(
                "cannot build {n} uniform points on [{lower}, {upper}]"
            )));
        }
        let step = (upper - lower) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|k| lower + step * k as f64).collect();
        points[n - 1] = upper;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
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

    pub fn lower(&self) -> f64 {
        self.points[0]
    }

    pub fn upper(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn length(&self) -> f64 {
        self.upper() - self.lower()
    }

    /// Same points, up to a relative tolerance.
    pub fn matches(&self, other: &TimeGrid) -> bool {
        if self.points.len() != other.points.len() {
            return false;
        }
        let scale = self.length().abs().max(1.0);
        self.points
            .iter()
            .zip(&other.points)
            .all(|(a, b)| (a - b).abs() <= GRID_MATCH_TOL * scale)
    }

    /// Square roots of the weights, used to move between the weighted and
    /// the Euclidean picture.
    pub fn sqrt_weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.weights.iter().map(|w| w.sqrt()))
    }

    /// Linear interpolation of grid values at `t`. Times outside the grid
    /// (beyond a tiny tolerance) are an extrapolation error.
    pub fn interpolate(&self, values: &[f64], t: f64) -> Result<f64> {
        let (k, frac) = self.locate(t)?;
        if frac == 0.0 {
            return Ok(values[k]);
        }
        Ok(values[k] * (1.0 - frac) + values[k + 1] * frac)
    }

    /// Segment index and fractional position for `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-9 * self.length().abs().max(1.0);
        let (lo, hi) = (self.lower(), self.upper());
        if !t.is_finite() || t < lo - tol || t > hi + tol {
            return Err(FgccaError::Extrapolation {
                time: t,
                lower: lo,
                upper: hi,
            });
        }
        let t = t.clamp(lo, hi);
        let n = self.points.len();
        let k = match self
            .points
            .binary_search_by(|p| p.partial_cmp(&t).expect("finite grid"))
        {
            Ok(k) => return Ok((k.min(n - 1), 0.0)),
            Err(k) => k - 1,
        };
        let frac = (t - self.points[k]) / (self.points[k + 1] - self.points[k]);
        Ok((k, frac))
    }
}

fn check_same(a: &TimeGrid, b: &TimeGrid, what: &str) -> Result<()> {
    if std::ptr::eq(a, b) || a.matches(b) {
        Ok(())
    } else {
        Err(FgccaError::IncompatibleGrid(what.to_string()))
    }
}

/// A function in L²(I) sampled on a grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<TimeGrid>,
    values: DVector<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<TimeGrid>, values: DVector<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FgccaError::Dimension(format!(
                "function has {} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FgccaError::NumericalFailure("non-finite function value".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<TimeGrid>, f: impl Fn(f64) -> f64) -> Self {
        let values = DVector::from_iterator(grid.len(), grid.points().iter().map(|&t| f(t)));
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<TimeGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: DVector::zeros(n),
        }
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<TimeGrid>, values: DVector<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: &self.values * factor,
        }
    }

    /// L² norm under the grid quadrature.
    pub fn norm(&self) -> f64 {
        weighted_dot(self.grid.weights(), &self.values, &self.values).sqrt()
    }

    pub fn interpolate(&self, t: f64) -> Result<f64> {
        self.grid.interpolate(self.values.as_slice(), t)
    }
}

pub(crate) fn weighted_dot(weights: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

/// Quadrature inner product `Σ_k w_k f_k g_k`.
pub fn inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_same(&f.grid, &g.grid, "inner product operands")?;
    Ok(weighted_dot(f.grid.weights(), &f.values, &g.values))
}

/// Integral operator `L²(col_grid) → L²(row_grid)` stored as its kernel.
#[derive(Debug, Clone)]
pub struct GridOperator {
    row_grid: Arc<TimeGrid>,
    col_grid: Arc<TimeGrid>,
    kernel: DMatrix<f64>,
}

impl GridOperator {
    pub fn new(row_grid: Arc<TimeGrid>, col_grid: Arc<TimeGrid>, kernel: DMatrix<f64>) -> Result<Self> {
        if kernel.nrows() != row_grid.len() || kernel.ncols() != col_grid.len() {
            return Err(FgccaError::Dimension(format!(
                "kernel is {}x{}, grids are {}x{}",
                kernel.nrows(),
                kernel.ncols(),
                row_grid.len(),
                col_grid.len()
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(FgccaError::NumericalFailure("non-finite kernel entry".into()));
        }
        Ok(Self {
            row_grid,
            col_grid,
            kernel,
        })
    }

    pub fn zeros(row_grid: Arc<TimeGrid>, col_grid: Arc<TimeGrid>) -> Self {
        let kernel = DMatrix::zeros(row_grid.len(), col_grid.len());
        Self {
            row_grid,
            col_grid,
            kernel,
        }
    }

    /// Tensor-product kernel `u(s) v(t)`.
    pub fn rank_one(u: &GridFunction, v: &GridFunction, scale: f64) -> Self {
        Self {
            row_grid: u.grid.clone(),
            col_grid: v.grid.clone(),
            kernel: &u.values * v.values.transpose() * scale,
        }
    }

    pub(crate) fn from_parts_unchecked(row_grid: Arc<TimeGrid>, col_grid: Arc<TimeGrid>, kernel: DMatrix<f64>) -> Self {
        Self {
            row_grid,
            col_grid,
            kernel,
        }
    }

    pub fn row_grid(&self) -> &Arc<TimeGrid> {
        &self.row_grid
    }

    pub fn col_grid(&self) -> &Arc<TimeGrid> {
        &self.col_grid
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn transpose(&self) -> Self {
        Self {
            row_grid: self.col_grid.clone(),
            col_grid: self.row_grid.clone(),
            kernel: self.kernel.transpose(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            row_grid: self.row_grid.clone(),
            col_grid: self.col_grid.clone(),
            kernel: &self.kernel * factor,
        }
    }

    /// Diagonal `K(t, t)` of a square operator on a single grid.
    pub fn diagonal(&self) -> DVector<f64> {
        self.kernel.diagonal()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.kernel.nrows() == self.kernel.ncols()
            && (0..self.kernel.nrows())
                .all(|i| (0..i).all(|j| (self.kernel[(i, j)] - self.kernel[(j, i)]).abs() <= tol))
    }

    /// Action on raw column-grid values without a grid check.
    pub(crate) fn apply_values(&self, values: &DVector<f64>) -> DVector<f64> {
        let weighted = DVector::from_iterator(
            values.len(),
            values.iter().zip(self.col_grid.weights()).map(|(v, w)| v * w),
        );
        &self.kernel * weighted
    }

    /// Action of the adjoint on raw row-grid values.
    pub(crate) fn apply_transpose_values(&self, values: &DVector<f64>) -> DVector<f64> {
        let weighted = DVector::from_iterator(
            values.len(),
            values.iter().zip(self.row_grid.weights()).map(|(v, w)| v * w),
        );
        self.kernel.tr_mul(&weighted)
    }

    /// Kernel in orthonormal coordinates: `W_row^{1/2} K W_col^{1/2}`.
    pub fn symmetrized_kernel(&self) -> DMatrix<f64> {
        let dr = self.row_grid.sqrt_weights();
        let dc = self.col_grid.sqrt_weights();
        let mut m = self.kernel.clone();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] *= dr[i] * dc[j];
            }
        }
        m
    }
}

/// `(K f)(s) = Σ_t K(s, t) w_t f(t)`.
pub fn apply_operator(op: &GridOperator, f: &GridFunction) -> Result<GridFunction> {
    check_same(&op.col_grid, &f.grid, "operator column grid vs function grid")?;
    Ok(GridFunction {
        grid: op.row_grid.clone(),
        values: op.apply_values(&f.values),
    })
}

/// Adjoint action `(Kᵀ g)(t) = Σ_s K(s, t) w_s g(s)`.
pub fn apply_adjoint(op: &GridOperator, g: &GridFunction) -> Result<GridFunction> {
    check_same(&op.row_grid, &g.grid, "operator row grid vs function grid")?;
    Ok(GridFunction {
        grid: op.col_grid.clone(),
        values: op.apply_transpose_values(&g.values),
    })
}

/// Symmetric metric operator `M = α I + β K` on one grid, with `K` a
/// symmetric kernel. Factorized once at construction.
#[derive(Debug, Clone)]
pub struct Metric {
    process: usize,
    grid: Arc<TimeGrid>,
    identity_coef: f64,
    kernel_coef: f64,
    kernel: Option<DMatrix<f64>>,
    /// Cholesky factor of `α I + β W^{1/2} K W^{1/2}`; `None` for pure scalings.
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    sqrt_w: DVector<f64>,
}

impl Metric {
    /// `α I`.
    pub fn scaled_identity(process: usize, grid: Arc<TimeGrid>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(FgccaError::IllPosedMetric { process });
        }
        let sqrt_w = grid.sqrt_weights();
        Ok(Self {
            process,
            grid,
            identity_coef: alpha,
            kernel_coef: 0.0,
            kernel: None,
            factor: None,
            sqrt_w,
        })
    }

    pub fn identity(process: usize, grid: Arc<TimeGrid>) -> Result<Self> {
        Self::scaled_identity(process, grid, 1.0)
    }

    /// `α I + β K`. Fails with an ill-posed-metric error when the
    /// factorization does not succeed.
    pub fn new(process: usize, alpha: f64, beta: f64, kernel: &GridOperator) -> Result<Self> {
        if !kernel.row_grid.matches(&kernel.col_grid) {
            return Err(FgccaError::IncompatibleGrid(
                "metric kernel must be square on one grid".into(),
            ));
        }
        if beta == 0.0 {
            return Self::scaled_identity(process, kernel.row_grid.clone(), alpha);
        }
        let grid = kernel.row_grid.clone();
        let sqrt_w = grid.sqrt_weights();
        let mut a = kernel.symmetrized_kernel() * beta;
        let a_t = a.transpose();
        a = (a + a_t) * 0.5;
        for i in 0..a.nrows() {
            a[(i, i)] += alpha;
        }
        let factor = nalgebra::Cholesky::new(a).ok_or(FgccaError::IllPosedMetric { process })?;
        // A numerically singular factor is as bad as a failed one.
        let diag = factor.l_dirty().diagonal();
        let max_d = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let min_d = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
        if !(min_d > 1e-8 * max_d) {
            return Err(FgccaError::IllPosedMetric { process });
        }
        Ok(Self {
            process,
            grid,
            identity_coef: alpha,
            kernel_coef: beta,
            kernel: Some(kernel.kernel.clone()),
            factor: Some(factor),
            sqrt_w,
        })
    }

    pub fn process(&self) -> usize {
        self.process
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn is_identity(&self) -> bool {
        self.kernel.is_none() && self.identity_coef == 1.0
    }

    pub(crate) fn apply_values(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.identity_coef;
        if let Some(k) = &self.kernel {
            let weighted = DVector::from_iterator(v.len(), v.iter().zip(self.grid.weights()).map(|(x, w)| x * w));
            out += k * weighted * self.kernel_coef;
        }
        out
    }

    pub(crate) fn solve_values(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            None => rhs / self.identity_coef,
            Some(chol) => {
                let z = rhs.component_mul(&self.sqrt_w);
                let y = chol.solve(&z);
                y.component_div(&self.sqrt_w)
            }
        }
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        check_same(&self.grid, &f.grid, "metric vs function grid")?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            values: self.apply_values(&f.values),
        })
    }

    /// `⟨v, M v⟩`.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        weighted_dot(self.grid.weights(), v, &self.apply_values(v))
    }

    /// `‖M^{-1/2} v‖ = √⟨v, M^{-1} v⟩`, without a matrix square root.
    pub fn inverse_norm(&self, v: &DVector<f64>) -> f64 {
        weighted_dot(self.grid.weights(), v, &self.solve_values(v))
            .max(0.0)
            .sqrt()
    }
}

/// Solves `M x = rhs`.
pub fn solve_metric(metric: &Metric, rhs: &GridFunction) -> Result<GridFunction> {
    check_same(&metric.grid, &rhs.grid, "metric vs right-hand side grid")?;
    let x = metric.solve_values(&rhs.values);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FgccaError::IllPosedMetric {
            process: metric.process,
        });
    }
    Ok(GridFunction {
        grid: metric.grid.clone(),
        values: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_grid(n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(0.0, 1.0, n).unwrap())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn trapezoid_examples() {
        assert!(close(
            &trapezoid_weights(&[0.0, 0.5, 1.0]).unwrap(),
            &[0.25, 0.5, 0.25],
            1e-15
        ));
        assert!(close(&trapezoid_weights(&[0.0, 1.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(
            &trapezoid_weights(&[0.0, 0.1, 0.4, 1.0]).unwrap(),
            &[0.05, 0.2, 0.45, 0.3],
            1e-15
        ));
    }

    #[test]
    fn trapezoid_rejects_bad_points() {
        assert!(matches!(
            trapezoid_weights(&[0.0, 0.0, 1.0]),
            Err(FgccaError::InvalidGrid(_))
        ));
        assert!(matches!(
            trapezoid_weights(&[1.0, 0.5]),
            Err(FgccaError::InvalidGrid(_))
        ));
        assert!(matches!(trapezoid_weights(&[0.0]), Err(FgccaError::InvalidGrid(_))));
    }

    #[test]
    fn weights_sum_to_length() {
        let g = TimeGrid::new(vec![-1.0, -0.3, 0.2, 0.25, 2.0]).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 3.0).abs() < 1e-12 * 3.0);
    }

    #[test]
    fn inner_product_examples() {
        let g = unit_grid(11);
        let one = GridFunction::from_fn(g.clone(), |_| 1.0);
        assert!((inner_product(&one, &one).unwrap() - 1.0).abs() < 1e-14);

        let g = unit_grid(101);
        let s = GridFunction::from_fn(g.clone(), |t| (2.0 * PI * t).sin());
        let c = GridFunction::from_fn(g.clone(), |t| (2.0 * PI * t).cos());
        assert!(inner_product(&s, &c).unwrap().abs() < 1e-6);
        let f = GridFunction::from_fn(g, |t| 2f64.sqrt() * (2.0 * PI * t).sin());
        assert!((inner_product(&f, &f).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn inner_product_grid_mismatch() {
        let a = GridFunction::from_fn(unit_grid(11), |t| t);
        let b = GridFunction::from_fn(unit_grid(12), |t| t);
        assert!(matches!(inner_product(&a, &b), Err(FgccaError::IncompatibleGrid(_))));
    }

    #[test]
    fn inner_product_exact_for_piecewise_linear() {
        // ∫_0^1 (1 + t)(2 - t) dt is not piecewise-linear, but a product of a
        // hat-shaped integrand with 1 is: ∫ |t - 0.3| dt on a grid containing 0.3.
        let g = Arc::new(TimeGrid::new(vec![0.0, 0.1, 0.3, 0.7, 1.0]).unwrap());
        let f = GridFunction::from_fn(g.clone(), |t| (t - 0.3).abs());
        let one = GridFunction::from_fn(g, |_| 1.0);
        let exact = 0.3f64.powi(2) / 2.0 + 0.7f64.powi(2) / 2.0;
        assert!((inner_product(&f, &one).unwrap() - exact).abs() < 1e-15);
    }

    #[test]
    fn apply_operator_examples() {
        let g = unit_grid(101);
        let u = GridFunction::from_fn(g.clone(), |t| t * t);
        let v = GridFunction::from_fn(g.clone(), |t| (3.0 * t).cos());
        let h = GridFunction::from_fn(g.clone(), |t| 1.0 + t);
        let k = GridOperator::rank_one(&u, &v, 1.0);
        let out = apply_operator(&k, &h).unwrap();
        let expected = u.values() * inner_product(&v, &h).unwrap();
        assert!((out.values() - expected).amax() < 1e-12);

        let zero = GridOperator::zeros(g.clone(), g.clone());
        assert_eq!(apply_operator(&zero, &h).unwrap().values().amax(), 0.0);

        let ones = GridOperator::new(g.clone(), g.clone(), DMatrix::from_element(101, 101, 1.0)).unwrap();
        let t = GridFunction::from_fn(g, |t| t);
        let out = apply_operator(&ones, &t).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.5).abs() < 1e-4));
    }

    #[test]
    fn apply_operator_grid_mismatch() {
        let k = GridOperator::zeros(unit_grid(5), unit_grid(6));
        let f = GridFunction::from_fn(unit_grid(5), |t| t);
        assert!(apply_operator(&k, &f).is_err());
    }

    #[test]
    fn solve_metric_examples() {
        let g = unit_grid(21);
        let rhs = GridFunction::from_fn(g.clone(), |t| (5.0 * t).sin() + 0.2);
        let id = Metric::identity(0, g.clone()).unwrap();
        let x = solve_metric(&id, &rhs).unwrap();
        assert!((x.values() - rhs.values()).amax() < 1e-15);

        let two = Metric::scaled_identity(0, g.clone(), 2.0).unwrap();
        let x = solve_metric(&two, &rhs).unwrap();
        assert!((x.values() - rhs.values() / 2.0).amax() < 1e-15);

        let phi = GridFunction::from_fn(g.clone(), |t| 2f64.sqrt() * (PI * t).sin());
        let k = GridOperator::rank_one(&phi, &phi, 1.0);
        let m = Metric::new(0, 0.5, 0.5, &k).unwrap();
        let x = solve_metric(&m, &rhs).unwrap();
        let back = m.apply(&x).unwrap();
        let rel = (back.values() - rhs.values()).norm() / rhs.values().norm();
        assert!(rel < 1e-10, "residual {rel}");
    }

    #[test]
    fn indefinite_metric_is_rejected() {
        let g = unit_grid(11);
        let phi = GridFunction::from_fn(g.clone(), |_| 1.0);
        let k = GridOperator::rank_one(&phi, &phi, -10.0);
        let err = Metric::new(3, 0.5, 0.5, &k).unwrap_err();
        assert!(matches!(err, FgccaError::IllPosedMetric { process: 3 }));
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let g = TimeGrid::new(vec![0.0, 1.0, 3.0]).unwrap();
        let v = [0.0, 2.0, 6.0];
        assert!((g.interpolate(&v, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((g.interpolate(&v, 2.0).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(g.interpolate(&v, 3.0).unwrap(), 6.0);
        assert!(matches!(g.interpolate(&v, 3.5), Err(FgccaError::Extrapolation { .. })));
    }
}
