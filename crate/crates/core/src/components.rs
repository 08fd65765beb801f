//! Subject-level scores: conditional-expectation (BLUP) scores from sparse
//! observations, quadrature scores for dense data, decorrelation of
//! uncorrelated-mode components, reconstruction and point prediction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ProcessModel;
use crate::data::{LongitudinalDataset, SparseSample};
use crate::deflation::FgccaFit;
use crate::error::{FgccaError, Result};
use crate::numerics::{inner_product, GridFunction, TimeGrid};
use crate::operators::OperatorSet;
use crate::solver::DeflationMode;

/// Noise variances below this are raised to it inside the BLUP solve.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Default largest coverage gap, as a share of the interval, accepted by
/// quadrature scoring.
pub const DEFAULT_MAX_GAP: f64 = 0.2;

/// Everything needed to score a subject. Scores are indexed process-major:
/// `ξ_j^m` sits at `j * M + m`.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub mode: DeflationMode,
    /// `functions[j][m]`.
    pub functions: Vec<Vec<GridFunction>>,
    pub score_cov: DMatrix<f64>,
    pub noise_vars: Vec<f64>,
    pub means: Vec<GridFunction>,
    /// True when negative eigenvalues of the score covariance were clamped.
    pub clamped: bool,
    sqrt_cov: DMatrix<f64>,
}

impl ScoreModel {
    pub fn new(
        mode: DeflationMode,
        functions: Vec<Vec<GridFunction>>,
        score_cov: DMatrix<f64>,
        noise_vars: Vec<f64>,
        means: Vec<GridFunction>,
    ) -> Result<Self> {
        let j = functions.len();
        let m = functions.first().map_or(0, Vec::len);
        if j == 0 || m == 0 || functions.iter().any(|f| f.len() != m) {
            return Err(FgccaError::Dimension("ragged or empty canonical functions".into()));
        }
        if score_cov.nrows() != j * m || score_cov.ncols() != j * m {
            return Err(FgccaError::Dimension(format!(
                "score covariance is {}x{}, expected {}",
                score_cov.nrows(),
                score_cov.ncols(),
                j * m
            )));
        }
        if noise_vars.len() != j || means.len() != j {
            return Err(FgccaError::Dimension("noise variances or means per process".into()));
        }
        for (p, fs) in functions.iter().enumerate() {
            if fs.iter().any(|f| !f.grid().matches(means[p].grid())) {
                return Err(FgccaError::IncompatibleGrid(format!("functions of process {}", p + 1)));
            }
        }
        let (cov, clamped) = psd_clamp(&score_cov);
        if clamped {
            log::warn!("score covariance was indefinite; negative eigenvalues set to zero");
        }
        let sqrt_cov = psd_sqrt(&cov);
        Ok(Self {
            mode,
            functions,
            score_cov: cov,
            noise_vars,
            means,
            clamped,
            sqrt_cov,
        })
    }

    /// Score model of a fit on an estimated process model: raw-scale
    /// covariance quadratic forms, raw noise variances and means.
    pub fn from_fit(model: &ProcessModel, fit: &FgccaFit) -> Result<Self> {
        let functions: Vec<Vec<GridFunction>> = (0..fit.n_processes())
            .map(|j| fit.process_functions(j).into_iter().cloned().collect())
            .collect();
        let cov = estimate_score_cov(&model.covariances, fit);
        Self::new(fit.mode, functions, cov, model.noise_vars.clone(), model.means.clone())
    }

    pub fn n_processes(&self) -> usize {
        self.functions.len()
    }

    pub fn n_components(&self) -> usize {
        self.functions[0].len()
    }

    /// The model restricted to the first `m` orders of every process.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        let full = self.n_components();
        if m == 0 || m > full {
            return Err(FgccaError::Dimension(format!("cannot keep {m} of {full} components")));
        }
        let n = self.n_processes();
        let index: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |c| j * full + c)).collect();
        let cov = DMatrix::from_fn(n * m, n * m, |r, c| self.score_cov[(index[r], index[c])]);
        let functions = self.functions.iter().map(|fs| fs[..m].to_vec()).collect();
        Self::new(self.mode, functions, cov, self.noise_vars.clone(), self.means.clone())
    }

    pub fn grids(&self) -> Vec<Arc<TimeGrid>> {
        self.means.iter().map(|m| m.grid().clone()).collect()
    }
}

fn psd_clamp(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, false);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// `E[ξξᵀ]` from quadratic forms `⟨f_j^m, Σ_jk f_k^{m'}⟩` of the given
/// operators, symmetrized (not clamped).
pub fn estimate_score_cov(covariances: &OperatorSet, fit: &FgccaFit) -> DMatrix<f64> {
    let n = fit.n_processes();
    let m = fit.n_components();
    let mut out = DMatrix::zeros(n * m, n * m);
    for j in 0..n {
        for k in 0..n {
            for a in 0..m {
                let fk_b: Vec<_> = (0..m).map(|b| fit.function(b, k).values()).collect();
                for (b, fk) in fk_b.iter().enumerate() {
                    out[(j * m + a, k * m + b)] = covariances.bilinear(j, fit.function(a, j).values(), k, fk);
                }
            }
        }
    }
    (&out + out.transpose()) * 0.5
}

/// Conditional expectation of the scores given one subject's observations,
/// `ξ = Σ Fᵀ (F Σ Fᵀ + D)^{-1} (U − μ)`, evaluated as
/// `S (I + S Fᵀ D^{-1} F S)^{-1} S Fᵀ D^{-1} (U − μ)` with `S = Σ^{1/2}`.
pub fn blup_scores(samples: &[SparseSample], model: &ScoreModel) -> Result<DVector<f64>> {
    let n = model.n_processes();
    let m = model.n_components();
    if samples.len() != n {
        return Err(FgccaError::Dimension(format!(
            "{} processes observed, model has {n}",
            samples.len()
        )));
    }
    let dim = n * m;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let mut any = false;
    for (j, sample) in samples.iter().enumerate() {
        if sample.is_empty() {
            continue;
        }
        any = true;
        let inv_noise = 1.0 / model.noise_vars[j].max(NOISE_FLOOR);
        let mut rows = DMatrix::<f64>::zeros(sample.len(), m);
        let mut resid = DVector::<f64>::zeros(sample.len());
        for (r, (&t, &u)) in sample.times.iter().zip(&sample.values).enumerate() {
            resid[r] = u - model.means[j].interpolate(t)?;
            for (c, f) in model.functions[j].iter().enumerate() {
                rows[(r, c)] = f.interpolate(t)?;
            }
        }
        let block = rows.tr_mul(&rows) * inv_noise;
        let rhs = rows.tr_mul(&resid) * inv_noise;
        a.view_mut((j * m, j * m), (m, m)).copy_from(&block);
        b.rows_mut(j * m, m).copy_from(&rhs);
    }
    if !any {
        return Ok(DVector::zeros(dim));
    }
    let s = &model.sqrt_cov;
    let inner = DMatrix::identity(dim, dim) + s * &a * s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let chol = inner.cholesky().ok_or(FgccaError::SingularBlup)?;
    let x = s * chol.solve(&(s * b));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FgccaError::SingularBlup);
    }
    Ok(x)
}

/// Scores as inner products of the residual curve, linearly interpolated
/// onto the grid and held constant beyond the outermost observations, with
/// the canonical functions. `max_gap` bounds the largest uncovered stretch
/// as a share of the interval; `None` disables the check.
pub fn quadrature_scores(samples: &[SparseSample], model: &ScoreModel, max_gap: Option<f64>) -> Result<DVector<f64>> {
    let n = model.n_processes();
    let m = model.n_components();
    if samples.len() != n {
        return Err(FgccaError::Dimension(format!(
            "{} processes observed, model has {n}",
            samples.len()
        )));
    }
    let mut out = DVector::zeros(n * m);
    for (j, sample) in samples.iter().enumerate() {
        let grid = model.means[j].grid();
        if let Some(limit) = max_gap {
            let gap = coverage_gap(sample, grid);
            if gap > limit {
                return Err(FgccaError::SparseData { process: j, gap, limit });
            }
        }
        if sample.is_empty() {
            continue;
        }
        let mut resid = Vec::with_capacity(sample.len());
        for (&t, &u) in sample.times.iter().zip(&sample.values) {
            grid.locate(t)?;
            resid.push(u - model.means[j].interpolate(t)?);
        }
        let curve = GridFunction::from_fn(grid.clone(), |t| interpolate_held(&sample.times, &resid, t));
        for (c, f) in model.functions[j].iter().enumerate() {
            out[j * m + c] = inner_product(&curve, f)?;
        }
    }
    Ok(out)
}

/// Largest uncovered stretch of the interval as a share of its length.
fn coverage_gap(sample: &SparseSample, grid: &TimeGrid) -> f64 {
    let len = grid.length();
    if sample.is_empty() {
        return 1.0;
    }
    let mut gap = (sample.times[0] - grid.lower()).max(grid.upper() - sample.times[sample.len() - 1]);
    for w in sample.times.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap / len
}

fn interpolate_held(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    let i = times.partition_point(|&x| x <= t).max(1) - 1;
    let (t0, t1) = (times[i], times[i + 1]);
    let lambda = (t - t0) / (t1 - t0);
    values[i] * (1.0 - lambda) + values[i + 1] * lambda
}

/// Per-subject coefficients `ξ` and components `y`, process-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub mode: DeflationMode,
    pub n_processes: usize,
    pub n_components: usize,
    pub subject_ids: Vec<String>,
    pub xi: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl ComponentSet {
    pub fn xi(&self, subject: usize, process: usize, order: usize) -> f64 {
        self.xi[subject][process * self.n_components + order]
    }

    pub fn y(&self, subject: usize, process: usize, order: usize) -> f64 {
        self.y[subject][process * self.n_components + order]
    }

    /// Column of `y_j^m` across subjects.
    pub fn y_column(&self, process: usize, order: usize) -> Vec<f64> {
        (0..self.subject_ids.len()).map(|i| self.y(i, process, order)).collect()
    }

    pub fn to_rows(&self) -> Vec<ComponentRow> {
        let mut rows = Vec::with_capacity(self.subject_ids.len() * self.n_processes * self.n_components);
        for (i, id) in self.subject_ids.iter().enumerate() {
            for j in 0..self.n_processes {
                for m in 0..self.n_components {
                    rows.push(ComponentRow {
                        subject_id: id.clone(),
                        process_id: j + 1,
                        order: m + 1,
                        xi: self.xi(i, j, m),
                        y: self.y(i, j, m),
                    });
                }
            }
        }
        rows
    }
}

/// One line of the components table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub subject_id: String,
    pub process_id: usize,
    pub order: usize,
    pub xi: f64,
    pub y: f64,
}

/// Components from coefficients. Orthogonal mode keeps `y = ξ`;
/// uncorrelated mode residualizes each `ξ_j^{m+1}` across subjects on the
/// centered `y_j^1..y_j^m`, so that distinct orders have zero sample
/// correlation.
pub fn decorrelate(
    subject_ids: Vec<String>,
    xi: Vec<DVector<f64>>,
    mode: DeflationMode,
    n_processes: usize,
    n_components: usize,
) -> Result<ComponentSet> {
    if subject_ids.len() != xi.len() || xi.iter().any(|x| x.len() != n_processes * n_components) {
        return Err(FgccaError::Dimension(
            "score vectors do not match the component layout".into(),
        ));
    }
    let mut y = xi.clone();
    if mode == DeflationMode::Uncorrelated && !xi.is_empty() {
        let n = xi.len();
        for j in 0..n_processes {
            let mut centered: Vec<DVector<f64>> = Vec::with_capacity(n_components);
            for m in 0..n_components {
                let idx = j * n_components + m;
                let mut col = DVector::from_iterator(n, xi.iter().map(|x| x[idx]));
                for (k, basis) in centered.iter().enumerate() {
                    let ss = basis.norm_squared();
                    if !(ss > 0.0) {
                        log::warn!("process {} order {}: degenerate component skipped", j + 1, k + 1);
                        continue;
                    }
                    let beta = basis.dot(&col) / ss;
                    col -= basis * beta;
                }
                for (i, v) in col.iter().enumerate() {
                    y[i][idx] = *v;
                }
                let mean = col.mean();
                let mut c = col;
                c.add_scalar_mut(-mean);
                let scale = c.amax();
                if scale <= 1e-12 * xi.iter().map(|x| x[idx].abs()).fold(0.0, f64::max) {
                    c.fill(0.0);
                }
                centered.push(c);
            }
        }
    }
    Ok(ComponentSet {
        mode,
        n_processes,
        n_components,
        subject_ids,
        xi,
        y,
    })
}

/// How subjects are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScoringMethod {
    Blup,
    Quadrature { max_gap: Option<f64> },
}

/// Scores every subject, in parallel, and decorrelates.
pub fn score_dataset(dataset: &LongitudinalDataset, model: &ScoreModel, method: ScoringMethod) -> Result<ComponentSet> {
    let xi: Vec<DVector<f64>> = dataset
        .subjects()
        .par_iter()
        .map(|s| match method {
            ScoringMethod::Blup => blup_scores(&s.samples, model),
            ScoringMethod::Quadrature { max_gap } => quadrature_scores(&s.samples, model, max_gap),
        })
        .collect::<Result<_>>()?;
    let ids = dataset.subjects().iter().map(|s| s.id.clone()).collect();
    decorrelate(ids, xi, model.mode, model.n_processes(), model.n_components())
}

/// Whether a score vector holds coefficients `ξ` or components `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreBasis {
    Coefficients,
    Components,
}

/// `μ_j + Σ_m ξ^m f_j^m` on each target grid. Components are accepted only
/// in orthogonal mode, where they coincide with the coefficients.
pub fn reconstruct(
    scores: &DVector<f64>,
    basis: ScoreBasis,
    model: &ScoreModel,
    grids: &[Arc<TimeGrid>],
) -> Result<Vec<GridFunction>> {
    if basis == ScoreBasis::Components && model.mode == DeflationMode::Uncorrelated {
        return Err(FgccaError::ReconstructionBasis);
    }
    let n = model.n_processes();
    let m = model.n_components();
    if scores.len() != n * m || grids.len() != n {
        return Err(FgccaError::Dimension("scores or grids do not match the model".into()));
    }
    let mut out = Vec::with_capacity(n);
    for (j, grid) in grids.iter().enumerate() {
        let same = grid.matches(model.means[j].grid());
        let eval = |f: &GridFunction| -> Result<DVector<f64>> {
            if same {
                Ok(f.values().clone())
            } else {
                let v: Vec<f64> = grid.points().iter().map(|&t| f.interpolate(t)).collect::<Result<_>>()?;
                Ok(DVector::from_vec(v))
            }
        };
        let mut values = eval(&model.means[j])?;
        for (c, f) in model.functions[j].iter().enumerate() {
            values += eval(f)? * scores[j * m + c];
        }
        out.push(GridFunction::new(grid.clone(), values)?);
    }
    Ok(out)
}

/// BLUP scores from partial observations, reconstruction on the model
/// grids, then interpolation at `(process, time)` targets.
pub fn predict_points(samples: &[SparseSample], model: &ScoreModel, targets: &[(usize, f64)]) -> Result<Vec<f64>> {
    let xi = blup_scores(samples, model)?;
    let curves = reconstruct(&xi, ScoreBasis::Coefficients, model, &model.grids())?;
    targets
        .iter()
        .map(|&(j, t)| {
            let curve = curves
                .get(j)
                .ok_or_else(|| FgccaError::Dimension(format!("no process {}", j + 1)))?;
            curve.interpolate(t)
        })
        .collect()
}
