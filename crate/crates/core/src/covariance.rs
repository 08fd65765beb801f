//! Mean, (cross-)covariance surface, noise variance and normalization
//! estimates from sparse observations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{FgccaError, Result};
use crate::numerics::{GridFunction, GridOperator, TimeGrid, DEFAULT_GRID_SIZE};
use crate::operators::OperatorSet;
use crate::smooth::{Accumulator2d, Scatter1d};

/// Smoothing and grid settings for [`estimate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub grid_size: usize,
    /// Bandwidth as a fraction of each process interval, used when
    /// `bandwidths` is not given.
    pub bandwidth_fraction: f64,
    /// Explicit per-process bandwidths in time units.
    pub bandwidths: Option<Vec<f64>>,
    /// Central share of the interval averaged for the noise variance.
    pub central_fraction: f64,
    /// Rescale processes to unit integrated variance before fitting.
    pub normalize: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            bandwidth_fraction: 0.1,
            bandwidths: None,
            central_fraction: 0.5,
            normalize: true,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self, n_processes: usize) -> Result<()> {
        if self.grid_size < 2 {
            return Err(FgccaError::InvalidConfig("grid_size must be at least 2".into()));
        }
        if !(self.bandwidth_fraction > 0.0) {
            return Err(FgccaError::InvalidConfig("bandwidth_fraction must be positive".into()));
        }
        if !(self.central_fraction > 0.0 && self.central_fraction <= 1.0) {
            return Err(FgccaError::InvalidConfig("central_fraction must lie in (0,1]".into()));
        }
        if let Some(b) = &self.bandwidths {
            if b.len() != n_processes {
                return Err(FgccaError::InvalidConfig(format!(
                    "{} bandwidths for {n_processes} processes",
                    b.len()
                )));
            }
            if b.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                return Err(FgccaError::InvalidConfig("bandwidths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Bandwidth per process in time units.
    pub fn resolve_bandwidths(&self, intervals: &[(f64, f64)]) -> Vec<f64> {
        match &self.bandwidths {
            Some(b) => b.clone(),
            None => intervals
                .iter()
                .map(|(a, b)| self.bandwidth_fraction * (b - a))
                .collect(),
        }
    }
}

/// Bandwidths actually used by an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    /// Mean and diagonal smoothing, per process.
    pub process: Vec<f64>,
    /// Surface bandwidths `(j, k, h_j, h_k)` per stored pair, 0-based.
    pub surfaces: Vec<(usize, usize, f64, f64)>,
}

/// Estimated second-order structure of J processes.
#[derive(Debug, Clone)]
pub struct ProcessModel {
    pub grids: Vec<Arc<TimeGrid>>,
    pub means: Vec<GridFunction>,
    /// Raw-scale (cross-)covariance operators.
    pub covariances: OperatorSet,
    pub noise_vars: Vec<f64>,
    pub norm_weights: Vec<f64>,
    pub bandwidths: Bandwidths,
}

impl ProcessModel {
    pub fn n_processes(&self) -> usize {
        self.grids.len()
    }

    /// Operators entering the criterion: raw, or scaled by `w_j w_k`.
    pub fn operators(&self, normalize: bool) -> OperatorSet {
        if normalize {
            self.covariances.rescaled(&self.norm_weights)
        } else {
            self.covariances.clone()
        }
    }

    pub fn to_bundle(&self) -> ProcessModelBundle {
        let n = self.n_processes();
        let mut covariances = Vec::new();
        for j in 0..n {
            for k in j..n {
                covariances.push(KernelBundle::from_operator(j, k, self.covariances.upper(j, k)));
            }
        }
        ProcessModelBundle {
            schema_version: BUNDLE_VERSION,
            grids: self.grids.iter().map(|g| g.points().to_vec()).collect(),
            means: self.means.iter().map(|m| m.values().as_slice().to_vec()).collect(),
            covariances,
            noise_vars: self.noise_vars.clone(),
            norm_weights: self.norm_weights.clone(),
            bandwidths: self.bandwidths.clone(),
        }
    }

    pub fn from_bundle(b: &ProcessModelBundle) -> Result<Self> {
        if b.schema_version != BUNDLE_VERSION {
            return Err(FgccaError::Schema(format!(
                "model bundle version {} not supported",
                b.schema_version
            )));
        }
        let grids: Vec<Arc<TimeGrid>> = b
            .grids
            .iter()
            .map(|p| TimeGrid::new(p.clone()).map(Arc::new))
            .collect::<Result<_>>()?;
        let n = grids.len();
        if b.means.len() != n || b.noise_vars.len() != n || b.norm_weights.len() != n {
            return Err(FgccaError::Schema(
                "model bundle arrays disagree on process count".into(),
            ));
        }
        let means = b
            .means
            .iter()
            .zip(&grids)
            .map(|(v, g)| GridFunction::new(g.clone(), DVector::from_vec(v.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut upper = Vec::new();
        let mut it = b.covariances.iter();
        for j in 0..n {
            for k in j..n {
                let kb = it
                    .next()
                    .ok_or_else(|| FgccaError::Schema("missing covariance kernel".into()))?;
                if kb.row_process != j || kb.col_process != k {
                    return Err(FgccaError::Schema("covariance kernels out of order".into()));
                }
                upper.push(kb.to_operator(&grids[j], &grids[k])?);
            }
        }
        let covariances = OperatorSet::from_upper(grids.clone(), upper)?;
        Ok(Self {
            grids,
            means,
            covariances,
            noise_vars: b.noise_vars.clone(),
            norm_weights: b.norm_weights.clone(),
            bandwidths: b.bandwidths.clone(),
        })
    }
}

pub const BUNDLE_VERSION: u32 = 1;

/// JSON form of a [`ProcessModel`]; kernels are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessModelBundle {
    pub schema_version: u32,
    pub grids: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<KernelBundle>,
    pub noise_vars: Vec<f64>,
    pub norm_weights: Vec<f64>,
    pub bandwidths: Bandwidths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBundle {
    pub row_process: usize,
    pub col_process: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl KernelBundle {
    pub fn from_operator(row_process: usize, col_process: usize, op: &GridOperator) -> Self {
        let k = op.kernel();
        let mut data = Vec::with_capacity(k.len());
        for r in 0..k.nrows() {
            for c in 0..k.ncols() {
                data.push(k[(r, c)]);
            }
        }
        Self {
            row_process,
            col_process,
            rows: k.nrows(),
            cols: k.ncols(),
            data,
        }
    }

    pub fn to_operator(&self, row: &Arc<TimeGrid>, col: &Arc<TimeGrid>) -> Result<GridOperator> {
        if self.data.len() != self.rows * self.cols {
            return Err(FgccaError::Schema("kernel data length mismatch".into()));
        }
        GridOperator::new(
            row.clone(),
            col.clone(),
            DMatrix::from_row_slice(self.rows, self.cols, &self.data),
        )
    }
}

fn bandwidth_error(process: usize, t: f64) -> FgccaError {
    FgccaError::BandwidthTooSmall {
        location: format!("process {} grid point t = {t}", process + 1),
    }
}

/// Local-linear smooth of all observations of process `j`, pooled across
/// subjects and evaluated on `grid`.
pub fn estimate_mean(
    dataset: &LongitudinalDataset,
    j: usize,
    grid: &Arc<TimeGrid>,
    bandwidth: f64,
) -> Result<GridFunction> {
    if !(bandwidth > 0.0) {
        return Err(FgccaError::InvalidConfig("bandwidth must be positive".into()));
    }
    let scatter = Scatter1d::from_points(dataset.subjects().iter().flat_map(|s| {
        let smp = &s.samples[j];
        smp.times.iter().copied().zip(smp.values.iter().copied())
    }));
    if scatter.distinct_locations() < 2 {
        return Err(FgccaError::InsufficientData {
            process: j,
            message: "fewer than 2 distinct observation times".into(),
        });
    }
    let values = grid
        .points()
        .iter()
        .map(|&t| scatter.local_linear(t, bandwidth).map_err(|_| bandwidth_error(j, t)))
        .collect::<Result<Vec<f64>>>()?;
    GridFunction::new(grid.clone(), DVector::from_vec(values))
}

fn residuals(dataset: &LongitudinalDataset, subject: usize, j: usize, mean: &GridFunction) -> Result<Vec<f64>> {
    let smp = dataset.sample(subject, j);
    smp.times
        .iter()
        .zip(&smp.values)
        .map(|(&t, &u)| Ok(u - mean.interpolate(t)?))
        .collect()
}

/// Smoothed surface of raw residual products between processes `j` and `k`.
/// For `j = k` same-observation products are excluded and the result is
/// symmetrized.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cross_covariance(
    dataset: &LongitudinalDataset,
    j: usize,
    k: usize,
    grid_j: &Arc<TimeGrid>,
    grid_k: &Arc<TimeGrid>,
    bandwidth_j: f64,
    bandwidth_k: f64,
    mean_j: &GridFunction,
    mean_k: &GridFunction,
) -> Result<GridOperator> {
    let mut acc = Accumulator2d::default();
    let mut overlap = false;
    for i in 0..dataset.n_subjects() {
        let (sj, sk) = (dataset.sample(i, j), dataset.sample(i, k));
        if sj.is_empty() || sk.is_empty() {
            continue;
        }
        let rj = residuals(dataset, i, j, mean_j)?;
        let rk = if j == k {
            rj.clone()
        } else {
            residuals(dataset, i, k, mean_k)?
        };
        for (a, (&ta, &ra)) in sj.times.iter().zip(&rj).enumerate() {
            for (b, (&tb, &rb)) in sk.times.iter().zip(&rk).enumerate() {
                if j == k && a == b {
                    continue;
                }
                overlap = true;
                acc.push(ta, tb, ra * rb);
            }
        }
    }
    if !overlap {
        return Err(FgccaError::NoOverlap { first: j, second: k });
    }
    let scatter = acc.finish();
    let values = scatter
        .smooth_on_grid(grid_j.points(), grid_k.points(), bandwidth_j, bandwidth_k)
        .map_err(|(s, t)| FgccaError::BandwidthTooSmall {
            location: format!("surface ({}, {}) at ({s}, {t})", j + 1, k + 1),
        })?;
    let mut kernel = DMatrix::from_row_slice(grid_j.len(), grid_k.len(), &values);
    if j == k {
        let kt = kernel.transpose();
        kernel = (kernel + kt) * 0.5;
    }
    GridOperator::new(grid_j.clone(), grid_k.clone(), kernel)
}

/// Noise variance from the gap between the smoothed raw variance along the
/// diagonal and the diagonal of the covariance surface, averaged over the
/// central part of the interval and clamped at zero pointwise.
pub fn estimate_noise_variance(
    dataset: &LongitudinalDataset,
    j: usize,
    mean: &GridFunction,
    covariance: &GridOperator,
    bandwidth: f64,
    central_fraction: f64,
) -> Result<f64> {
    let mut points = Vec::new();
    for i in 0..dataset.n_subjects() {
        let smp = dataset.sample(i, j);
        let r = residuals(dataset, i, j, mean)?;
        points.extend(smp.times.iter().copied().zip(r.into_iter().map(|x| x * x)));
    }
    let scatter = Scatter1d::from_points(points);
    let grid = covariance.row_grid();
    let diag = covariance.diagonal();
    let margin = 0.5 * (1.0 - central_fraction) * grid.length();
    let (lo, hi) = (grid.lower() + margin, grid.upper() - margin);
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, &t) in grid.points().iter().enumerate() {
        if t < lo - 1e-12 || t > hi + 1e-12 {
            continue;
        }
        let v = scatter.local_linear(t, bandwidth).map_err(|_| bandwidth_error(j, t))?;
        total += (v - diag[idx]).max(0.0);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// `w_j = (∫ Σ_jj(t, t) dt)^{-1/2}`.
pub fn normalization_weight(covariance: &GridOperator, process: usize) -> Result<f64> {
    let grid = covariance.row_grid();
    let integral: f64 = covariance
        .diagonal()
        .iter()
        .zip(grid.weights())
        .map(|(d, w)| d * w)
        .sum();
    if !(integral > 0.0) || !integral.is_finite() {
        return Err(FgccaError::DegenerateProcess {
            process,
            value: integral,
        });
    }
    Ok(integral.powf(-0.5))
}

/// Runs every estimator and assembles a [`ProcessModel`]. Surfaces for
/// distinct pairs are estimated in parallel.
pub fn estimate_model(dataset: &LongitudinalDataset, config: &EstimationConfig) -> Result<ProcessModel> {
    dataset.require_observed()?;
    let n = dataset.n_processes();
    config.validate(n)?;
    let grids: Vec<Arc<TimeGrid>> = dataset
        .intervals()
        .iter()
        .map(|&(a, b)| TimeGrid::uniform(a, b, config.grid_size).map(Arc::new))
        .collect::<Result<_>>()?;
    let bw = config.resolve_bandwidths(dataset.intervals());
    let means: Vec<GridFunction> = (0..n)
        .map(|j| estimate_mean(dataset, j, &grids[j], bw[j]))
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (j..n).map(move |k| (j, k))).collect();
    let ops: Vec<GridOperator> = pairs
        .par_iter()
        .map(|&(j, k)| {
            estimate_cross_covariance(dataset, j, k, &grids[j], &grids[k], bw[j], bw[k], &means[j], &means[k])
        })
        .collect::<Result<_>>()?;
    let covariances = OperatorSet::from_upper(grids.clone(), ops)?;

    let noise_vars = (0..n)
        .map(|j| {
            estimate_noise_variance(
                dataset,
                j,
                &means[j],
                covariances.upper(j, j),
                bw[j],
                config.central_fraction,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let norm_weights = (0..n)
        .map(|j| normalization_weight(covariances.upper(j, j), j))
        .collect::<Result<Vec<_>>>()?;
    let surfaces = pairs.iter().map(|&(j, k)| (j, k, bw[j], bw[k])).collect();
    Ok(ProcessModel {
        grids,
        means,
        covariances,
        noise_vars,
        norm_weights,
        bandwidths: Bandwidths { process: bw, surfaces },
    })
}

/// Leave-one-subject-out cross-validation scores of the mean smoother.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub best: f64,
    pub candidates: Vec<f64>,
    /// Mean squared prediction error per candidate; `None` when some
    /// held-out point had an empty window.
    pub scores: Vec<Option<f64>>,
}

/// Chooses the mean bandwidth for process `j` by leave-one-subject-out
/// prediction error over `candidates`.
pub fn select_mean_bandwidth(
    dataset: &LongitudinalDataset,
    j: usize,
    candidates: &[f64],
) -> Result<BandwidthSelection> {
    if candidates.is_empty() || candidates.iter().any(|h| !(*h > 0.0)) {
        return Err(FgccaError::InvalidConfig(
            "bandwidth candidates must be positive".into(),
        ));
    }
    let held_out: Vec<(Scatter1d, &crate::data::SparseSample)> = (0..dataset.n_subjects())
        .filter(|&i| !dataset.sample(i, j).is_empty())
        .map(|i| {
            let others =
                Scatter1d::from_points(dataset.subjects().iter().enumerate().filter(|(o, _)| *o != i).flat_map(
                    |(_, s)| {
                        let smp = &s.samples[j];
                        smp.times.iter().copied().zip(smp.values.iter().copied())
                    },
                ));
            (others, dataset.sample(i, j))
        })
        .collect();
    let scores: Vec<Option<f64>> = candidates
        .iter()
        .map(|&h| {
            let mut sse = 0.0;
            let mut n = 0usize;
            for (scatter, smp) in &held_out {
                for (&t, &u) in smp.times.iter().zip(&smp.values) {
                    let fit = scatter.local_linear(t, h).ok()?;
                    sse += (u - fit).powi(2);
                    n += 1;
                }
            }
            (n > 0).then(|| sse / n as f64)
        })
        .collect();
    let best = candidates
        .iter()
        .zip(&scores)
        .filter_map(|(h, s)| s.map(|s| (*h, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(h, _)| h)
        .ok_or_else(|| FgccaError::BandwidthTooSmall {
            location: format!("every candidate for process {}", j + 1),
        })?;
    Ok(BandwidthSelection {
        best,
        candidates: candidates.to_vec(),
        scores,
    })
}
