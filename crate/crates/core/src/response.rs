//! Multivariate response block: cross-covariance kernels `E[X_j(t) Y]`,
//! the extended fit where a unit weight vector `a ∈ R^p` joins the
//! criterion, and a small logistic-regression utility for weighted-vote
//! outcome prediction.

use nalgebra::{DMatrix, DVector};

use crate::data::{LongitudinalDataset, ResponseTable};
use crate::deflation::{fit_orders, FgccaFit};
use crate::error::{FgccaError, Result};
use crate::numerics::{GridFunction, TimeGrid};
use crate::operators::OperatorSet;
use crate::smooth::Scatter1d;
use crate::solver::FgccaConfig;

/// Centered responses aligned with the dataset's subjects.
#[derive(Debug, Clone)]
pub struct ResponseBlock {
    pub columns: Vec<String>,
    /// `N × p`, rows in dataset subject order.
    pub y: DMatrix<f64>,
    /// One `G_j × p` kernel per process, raw scale.
    pub cross_cov: Vec<DMatrix<f64>>,
}

impl ResponseBlock {
    /// Kernels entering the criterion, scaled by `w_j` when normalizing.
    pub fn kernels(&self, weights: Option<&[f64]>) -> Vec<DMatrix<f64>> {
        match weights {
            Some(w) => self.cross_cov.iter().zip(w).map(|(k, w)| k * *w).collect(),
            None => self.cross_cov.clone(),
        }
    }
}

/// Aligns a response table with the dataset by subject id and centers each
/// column; `standardize` also scales columns to unit sample variance.
pub fn align_response(table: &ResponseTable, dataset: &LongitudinalDataset, standardize: bool) -> Result<DMatrix<f64>> {
    let n = dataset.n_subjects();
    let p = table.columns.len();
    if p == 0 {
        return Err(FgccaError::Schema("response table has no value columns".into()));
    }
    let mut y = DMatrix::zeros(n, p);
    for (i, s) in dataset.subjects().iter().enumerate() {
        let row = table
            .rows
            .get(&s.id)
            .ok_or_else(|| FgccaError::InvalidDataset(format!("subject {} has no response", s.id)))?;
        for (c, v) in row.iter().enumerate() {
            y[(i, c)] = *v;
        }
    }
    for mut col in y.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        if standardize && n > 1 {
            let sd = (col.norm_squared() / (n - 1) as f64).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
    }
    Ok(y)
}

/// Local-linear smooth of `(t, (U − μ(t)) Y_i)` pooled over subjects, one
/// column per response coordinate.
pub fn estimate_response_cross_cov(
    dataset: &LongitudinalDataset,
    y: &DMatrix<f64>,
    process: usize,
    grid: &TimeGrid,
    bandwidth: f64,
    mean: &GridFunction,
) -> Result<DMatrix<f64>> {
    if y.nrows() != dataset.n_subjects() {
        return Err(FgccaError::Dimension(format!(
            "{} response rows for {} subjects",
            y.nrows(),
            dataset.n_subjects()
        )));
    }
    let mut residuals = Vec::with_capacity(dataset.n_subjects());
    for i in 0..dataset.n_subjects() {
        let s = dataset.sample(i, process);
        let r: Vec<(f64, f64)> = s
            .times
            .iter()
            .zip(&s.values)
            .map(|(&t, &u)| Ok((t, u - mean.interpolate(t)?)))
            .collect::<Result<_>>()?;
        residuals.push(r);
    }
    let mut out = DMatrix::zeros(grid.len(), y.ncols());
    for c in 0..y.ncols() {
        if y.column(c).iter().all(|&v| v == 0.0) {
            log::warn!("response column {} is constant; its cross-covariance is zero", c + 1);
            continue;
        }
        let scatter = Scatter1d::from_points(
            residuals
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().map(move |&(t, e)| (t, e * y[(i, c)]))),
        );
        for (g, &t) in grid.points().iter().enumerate() {
            out[(g, c)] = scatter
                .local_linear(t, bandwidth)
                .map_err(|_| FgccaError::BandwidthTooSmall {
                    location: format!("response cross-covariance of process {} at t = {t}", process + 1),
                })?;
        }
    }
    Ok(out)
}

/// Cross-covariance kernels for every process of an estimated model.
pub fn estimate_response_block(
    dataset: &LongitudinalDataset,
    y: DMatrix<f64>,
    columns: Vec<String>,
    means: &[GridFunction],
    bandwidths: &[f64],
) -> Result<ResponseBlock> {
    let cross_cov = means
        .iter()
        .enumerate()
        .map(|(j, mean)| estimate_response_cross_cov(dataset, &y, j, mean.grid(), bandwidths[j], mean))
        .collect::<Result<_>>()?;
    Ok(ResponseBlock { columns, y, cross_cov })
}

/// Fits orders `1..M` of the criterion extended by
/// `2 Σ_j g(⟨f_j, Σ_jY a⟩)`. The response kernels are deflated on the
/// functional side between orders. All-zero kernels reduce to the plain fit.
pub fn fit_with_response(ops: &OperatorSet, kernels: &[DMatrix<f64>], config: &FgccaConfig) -> Result<FgccaFit> {
    if kernels.len() != ops.n_processes() {
        return Err(FgccaError::Dimension(format!(
            "{} response kernels for {} processes",
            kernels.len(),
            ops.n_processes()
        )));
    }
    let p = kernels.first().map_or(0, |k| k.ncols());
    for (j, k) in kernels.iter().enumerate() {
        if k.nrows() != ops.grid(j).len() || k.ncols() != p || p == 0 {
            return Err(FgccaError::Dimension(format!(
                "response kernel {} has the wrong shape",
                j + 1
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(FgccaError::NumericalFailure(format!(
                "response kernel {} is not finite",
                j + 1
            )));
        }
    }
    fit_orders(ops, config, Some(kernels.to_vec()))
}

/// Logistic regression by iteratively reweighted least squares; returns
/// the intercept followed by one coefficient per column of `x`.
pub fn logistic_fit(x: &DMatrix<f64>, labels: &[f64], max_iters: usize) -> Result<DVector<f64>> {
    let n = x.nrows();
    if labels.len() != n || n == 0 {
        return Err(FgccaError::Dimension("labels do not match the design".into()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(FgccaError::InvalidDataset("labels must be 0 or 1".into()));
    }
    let q = x.ncols() + 1;
    let design = DMatrix::from_fn(n, q, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let mut beta = DVector::zeros(q);
    for _ in 0..max_iters {
        let eta = &design * &beta;
        let prob = eta.map(sigmoid);
        let w = prob.map(|p| (p * (1.0 - p)).max(1e-10));
        let mut hessian = design.transpose() * DMatrix::from_diagonal(&w) * &design;
        for d in 0..q {
            hessian[(d, d)] += 1e-8;
        }
        let grad = design.transpose() * (DVector::from_column_slice(labels) - prob);
        let step = hessian
            .cholesky()
            .ok_or_else(|| FgccaError::NumericalFailure("logistic Hessian is singular".into()))?
            .solve(&grad);
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

pub fn logistic_predict(beta: &DVector<f64>, x: &DMatrix<f64>) -> Vec<f64> {
    x.row_iter()
        .map(|row| sigmoid(beta[0] + row.iter().zip(beta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>()))
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Average of per-model probabilities weighted by `|weights|`.
pub fn weighted_vote(probabilities: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if probabilities.len() != weights.len() || probabilities.is_empty() {
        return Err(FgccaError::Dimension("one weight per model".into()));
    }
    let n = probabilities[0].len();
    let total: f64 = weights.iter().map(|w| w.abs()).sum();
    if !(total > 0.0) {
        return Err(FgccaError::InvalidConfig("vote weights are all zero".into()));
    }
    let mut out = vec![0.0; n];
    for (p, w) in probabilities.iter().zip(weights) {
        if p.len() != n {
            return Err(FgccaError::Dimension("probability vectors differ in length".into()));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v * w.abs() / total;
        }
    }
    Ok(out)
}
