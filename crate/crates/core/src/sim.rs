//! Synthetic coupled sparse functional data and the three simulation
//! benchmarks: scoring methods, FPCA/FSVD/FGCCA comparison and
//! reconstruction error.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::components::{blup_scores, quadrature_scores, reconstruct, ScoreBasis, ScoreModel};
use crate::covariance::{estimate_model, normalization_weight, Bandwidths, EstimationConfig, ProcessModel};
use crate::data::{LongitudinalDataset, SparseSample, SubjectRecord};
use crate::deflation::{fit_higher_order, FgccaFit};
use crate::error::{FgccaError, Result};
use crate::numerics::{inner_product, GridFunction, GridOperator, TimeGrid};
use crate::operators::OperatorSet;
use crate::solver::{apply_sign_convention, DeflationMode, FgccaConfig};

/// Share of the generation grid kept per subject and process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    Dense,
    Low,
    Medium,
    High,
}

impl Sparsity {
    /// Retention-rate band `[lo, hi]`.
    pub fn band(self) -> (f64, f64) {
        match self {
            Sparsity::Dense => (1.0, 1.0),
            Sparsity::Low => (0.8, 1.0),
            Sparsity::Medium => (0.4, 0.8),
            Sparsity::High => (0.1, 0.4),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Sparsity::Dense => "dense",
            Sparsity::Low => "low",
            Sparsity::Medium => "medium",
            Sparsity::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Fourier,
}

/// Generative design of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub n_processes: usize,
    /// Generative basis size per process.
    pub n_basis: usize,
    pub basis: Basis,
    /// Joint covariance of the scores, process-major; the default design
    /// when absent.
    pub score_cov: Option<Vec<Vec<f64>>>,
    pub n_subjects: usize,
    pub grid_size: usize,
    pub sparsity: Sparsity,
    pub sigma2: f64,
    pub seed: u64,
    /// Components estimated by the benchmarks.
    pub n_components: usize,
    /// Smoothing bandwidth as a share of the unit interval.
    pub bandwidth_fraction: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_processes: 3,
            n_basis: 6,
            basis: Basis::Fourier,
            score_cov: None,
            n_subjects: 100,
            grid_size: 50,
            sparsity: Sparsity::Dense,
            sigma2: 1.0,
            seed: 0,
            n_components: 6,
            bandwidth_fraction: 0.05,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FgccaError::InvalidConfig(m.into()));
        if self.n_processes == 0 || self.n_basis == 0 || self.n_subjects == 0 {
            return bad("process, basis and subject counts must be positive");
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return bad("sigma2 must be nonnegative");
        }
        if self.n_components == 0 || self.n_components > self.n_basis {
            return bad("n_components must lie in 1..=n_basis");
        }
        if !(self.bandwidth_fraction > 0.0) {
            return bad("bandwidth_fraction must be positive");
        }
        let cov = self.score_cov_matrix();
        let dim = self.n_processes * self.n_basis;
        if cov.nrows() != dim || cov.ncols() != dim {
            return bad("score_cov must be (n_processes * n_basis) square");
        }
        if (&cov - cov.transpose()).amax() > 1e-12 || cov.clone().cholesky().is_none() {
            return bad("score_cov must be symmetric positive definite");
        }
        Ok(())
    }

    pub fn score_cov_matrix(&self) -> DMatrix<f64> {
        match &self.score_cov {
            Some(rows) => {
                let n = rows.len();
                DMatrix::from_fn(n, rows.first().map_or(0, Vec::len), |r, c| rows[r][c])
            }
            None => default_score_cov(self.n_processes, self.n_basis),
        }
    }

    /// First 12 hex digits of the SHA-256 of the spec's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json)
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn grid(&self) -> Result<Arc<TimeGrid>> {
        Ok(Arc::new(TimeGrid::uniform(0.0, 1.0, self.grid_size)?))
    }
}

/// Variances `1, 0.85, 0.7, …` per order, identical across processes, and
/// correlation 0.5 between matching orders of different processes.
pub fn default_score_cov(n_processes: usize, n_basis: usize) -> DMatrix<f64> {
    let dim = n_processes * n_basis;
    DMatrix::from_fn(dim, dim, |r, c| {
        let (jr, mr) = (r / n_basis, r % n_basis);
        let (jc, mc) = (c / n_basis, c % n_basis);
        if mr != mc {
            return 0.0;
        }
        let v = (1.0 - 0.15 * mr as f64).max(0.05);
        if jr == jc {
            v
        } else {
            0.5 * v
        }
    })
}

/// `1, √2 sin 2πt, √2 cos 2πt, √2 sin 4πt, …` on the grid.
pub fn fourier_basis(m: usize, grid: &Arc<TimeGrid>) -> Vec<GridFunction> {
    (0..m)
        .map(|i| {
            let k = i.div_ceil(2) as f64;
            let two_pi_k = 2.0 * std::f64::consts::PI * k;
            GridFunction::from_fn(grid.clone(), move |t| {
                if i == 0 {
                    1.0
                } else if i % 2 == 1 {
                    2f64.sqrt() * (two_pi_k * t).sin()
                } else {
                    2f64.sqrt() * (two_pi_k * t).cos()
                }
            })
        })
        .collect()
}

/// A simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: LongitudinalDataset,
    pub grid: Arc<TimeGrid>,
    pub basis: Vec<GridFunction>,
    /// `N × (J·M_gen)`, process-major.
    pub scores: DMatrix<f64>,
    /// `trajectories[i][j]` on the generation grid.
    pub trajectories: Vec<Vec<DVector<f64>>>,
}

/// Draws scores jointly, builds trajectories on the grid, adds noise and
/// keeps a uniformly random subset of at least two points per curve.
pub fn generate(spec: &SimSpec) -> Result<SimData> {
    spec.validate()?;
    let grid = spec.grid()?;
    let basis = fourier_basis(spec.n_basis, &grid);
    let chol = spec
        .score_cov_matrix()
        .cholesky()
        .ok_or_else(|| FgccaError::InvalidConfig("score_cov must be positive definite".into()))?;
    let lower = chol.l();
    let (n, j_count, m_count, g) = (spec.n_subjects, spec.n_processes, spec.n_basis, spec.grid_size);
    let sd = spec.sigma2.sqrt();
    let (lo, hi) = spec.sparsity.band();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scores = DMatrix::zeros(n, j_count * m_count);
    let mut trajectories = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let z = DVector::from_iterator(
            j_count * m_count,
            (0..j_count * m_count).map(|_| StandardNormal.sample(&mut rng)),
        );
        let xi = &lower * z;
        scores.row_mut(i).copy_from(&xi.transpose());
        let mut curves = Vec::with_capacity(j_count);
        let mut samples = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let mut x = DVector::zeros(g);
            for (m, phi) in basis.iter().enumerate() {
                x += phi.values() * xi[j * m_count + m];
            }
            let rate: f64 = if hi > lo { rng.random_range(lo..hi) } else { hi };
            let count = ((rate * g as f64).round() as usize).clamp(2, g);
            let mut keep = sample(&mut rng, g, count).into_vec();
            keep.sort_unstable();
            let mut times = Vec::with_capacity(count);
            let mut values = Vec::with_capacity(count);
            for &k in &keep {
                let e: f64 = StandardNormal.sample(&mut rng);
                times.push(grid.points()[k]);
                values.push(x[k] + sd * e);
            }
            samples.push(SparseSample::new(times, values)?);
            curves.push(x);
        }
        trajectories.push(curves);
        subjects.push(SubjectRecord {
            id: (i + 1).to_string(),
            samples,
        });
    }
    let labels = (1..=j_count).map(|j| format!("X{j}")).collect();
    let dataset = LongitudinalDataset::new(vec![(0.0, 1.0); j_count], Some(labels), subjects)?;
    Ok(SimData {
        dataset,
        grid,
        basis,
        scores,
        trajectories,
    })
}

/// The exact second-order structure of the generative design on its grid.
pub fn population_model(spec: &SimSpec) -> Result<ProcessModel> {
    spec.validate()?;
    let grid = spec.grid()?;
    let basis = fourier_basis(spec.n_basis, &grid);
    let m = spec.n_basis;
    let cov = spec.score_cov_matrix();
    let phi = DMatrix::from_fn(grid.len(), m, |r, c| basis[c].values()[r]);
    let grids = vec![grid.clone(); spec.n_processes];
    let covariances = OperatorSet::from_fn(grids.clone(), |j, k| {
        let block = cov.view((j * m, k * m), (m, m)).into_owned();
        GridOperator::new(grid.clone(), grid.clone(), &phi * block * phi.transpose())
    })?;
    let norm_weights = (0..spec.n_processes)
        .map(|j| normalization_weight(covariances.upper(j, j), j))
        .collect::<Result<_>>()?;
    Ok(ProcessModel {
        grids,
        means: vec![GridFunction::zeros(grid.clone()); spec.n_processes],
        covariances,
        noise_vars: vec![spec.sigma2; spec.n_processes],
        norm_weights,
        bandwidths: Bandwidths {
            process: vec![0.0; spec.n_processes],
            surfaces: Vec::new(),
        },
    })
}

/// Operators of `J` processes on a common uniform grid whose joint kernel
/// is a random positive semidefinite matrix of the given rank.
pub fn random_operators(n_processes: usize, grid_size: usize, rank: usize, seed: u64) -> Result<OperatorSet> {
    let grid = Arc::new(TimeGrid::uniform(0.0, 1.0, grid_size)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor: DMatrix<f64> = DMatrix::from_fn(n_processes * grid_size, rank.max(1), |_, _| {
        StandardNormal.sample(&mut rng)
    });
    let joint = &factor * factor.transpose() / rank.max(1) as f64;
    OperatorSet::from_fn(vec![grid.clone(); n_processes], |j, k| {
        let block = joint
            .view((j * grid_size, k * grid_size), (grid_size, grid_size))
            .into_owned();
        GridOperator::new(grid.clone(), grid.clone(), block)
    })
}

/// Per-order errors after choosing, for each order, the sign that best
/// matches the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMse {
    pub signs: Vec<f64>,
    /// `∫(s f̂ − f)²` per order.
    pub functions: Vec<f64>,
    /// Mean of `(s ξ̂ − ξ)²` over subjects per order; empty without scores.
    pub components: Vec<f64>,
}

/// `estimated[m]`, `truth[m]` are order-`m` functions; `est_scores[m]` and
/// `true_scores[m]` hold that order's scores across subjects (both may be
/// empty).
pub fn mse_aligned(
    estimated: &[GridFunction],
    truth: &[GridFunction],
    est_scores: &[Vec<f64>],
    true_scores: &[Vec<f64>],
) -> Result<AlignedMse> {
    if estimated.len() != truth.len() || est_scores.len() != true_scores.len() {
        return Err(FgccaError::Dimension("estimate and truth differ in order count".into()));
    }
    if !est_scores.is_empty() && est_scores.len() != estimated.len() {
        return Err(FgccaError::Dimension(
            "scores and functions differ in order count".into(),
        ));
    }
    let mut signs = Vec::with_capacity(truth.len());
    let mut functions = Vec::with_capacity(truth.len());
    for (e, t) in estimated.iter().zip(truth) {
        let s = if inner_product(e, t)? < 0.0 { -1.0 } else { 1.0 };
        let diff = GridFunction::new(t.grid().clone(), e.values() * s - t.values())?;
        functions.push(inner_product(&diff, &diff)?);
        signs.push(s);
    }
    let mut components = Vec::with_capacity(est_scores.len());
    for ((e, t), s) in est_scores.iter().zip(true_scores).zip(&signs) {
        if e.len() != t.len() || e.is_empty() {
            return Err(FgccaError::Dimension("score vectors differ in length".into()));
        }
        let mse = e.iter().zip(t).map(|(a, b)| (s * a - b).powi(2)).sum::<f64>() / e.len() as f64;
        components.push(mse);
    }
    Ok(AlignedMse {
        signs,
        functions,
        components,
    })
}

/// Seed of replicate `r`, mixed so that neighbouring replicates differ in
/// every bit.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    let mut z = seed ^ r.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub replicate: usize,
    pub method: String,
    pub n_subjects: usize,
    pub order: usize,
    pub function_mse: Option<f64>,
    pub component_mse: Option<f64>,
    pub mrse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub n_subjects: usize,
    pub message: String,
}

/// Means over successful replicates for one method, subject count and order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n_subjects: usize,
    pub order: usize,
    pub replicates: usize,
    pub mean_function_mse: Option<f64>,
    pub mean_component_mse: Option<f64>,
    pub mean_mrse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    FunctionMse,
    ComponentMse,
    Mrse,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub simulation: String,
    pub spec: SimSpec,
    pub replicates: usize,
    pub rows: Vec<BenchRow>,
    pub failures: Vec<ReplicateFailure>,
    pub runtime: Duration,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    simulation: &'a str,
    spec: &'a SimSpec,
    spec_hash: String,
    replicates: usize,
    failure_count: usize,
    failures: &'a [ReplicateFailure],
    summary: Vec<SummaryRow>,
}

impl BenchReport {
    pub fn failure_count(&self) -> usize {
        self.failures.len()
    }

    fn metric(row: &BenchRow, metric: Metric) -> Option<f64> {
        match metric {
            Metric::FunctionMse => row.function_mse,
            Metric::ComponentMse => row.component_mse,
            Metric::Mrse => row.mrse,
        }
    }

    /// Mean of `metric` over replicates for a method, order and, when
    /// given, subject count.
    pub fn mean(&self, method: &str, order: usize, metric: Metric, n_subjects: Option<usize>) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.order == order && n_subjects.is_none_or(|n| r.n_subjects == n))
            .filter_map(|r| Self::metric(r, metric))
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, usize, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.n_subjects, r.order);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(method, n, order)| {
                let count = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.n_subjects == n && r.order == order)
                    .count();
                SummaryRow {
                    mean_function_mse: self.mean(&method, order, Metric::FunctionMse, Some(n)),
                    mean_component_mse: self.mean(&method, order, Metric::ComponentMse, Some(n)),
                    mean_mrse: self.mean(&method, order, Metric::Mrse, Some(n)),
                    method,
                    n_subjects: n,
                    order,
                    replicates: count,
                }
            })
            .collect()
    }

    /// `<simulation>_seed<seed>_<hash>`.
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}_{}", self.simulation, self.spec.seed, self.spec.hash())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| FgccaError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        let file = SummaryFile {
            simulation: &self.simulation,
            spec: &self.spec,
            spec_hash: self.spec.hash(),
            replicates: self.replicates,
            failure_count: self.failures.len(),
            failures: &self.failures,
            summary: self.summary(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Writes the CSV table and the JSON summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = self.file_stem();
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(std::fs::File::create(&csv_path)?)?;
        std::fs::write(&json_path, self.summary_json()? + "\n")?;
        Ok((csv_path, json_path))
    }
}

fn estimation_config(spec: &SimSpec) -> EstimationConfig {
    EstimationConfig {
        grid_size: spec.grid_size,
        bandwidth_fraction: spec.bandwidth_fraction,
        ..EstimationConfig::default()
    }
}

fn solver_config(spec: &SimSpec) -> FgccaConfig {
    let mut config = FgccaConfig::new(spec.n_processes);
    config.n_components = spec.n_components;
    config
}

/// Truth for order `m` of process `j`: the `m`-th basis function and the
/// matching generative scores.
fn true_scores(data: &SimData, spec: &SimSpec, j: usize) -> Vec<Vec<f64>> {
    (0..spec.n_components)
        .map(|m| data.scores.column(j * spec.n_basis + m).iter().copied().collect())
        .collect()
}

fn score_all(
    data: &SimData,
    model: &ScoreModel,
    method: impl Fn(&[SparseSample], &ScoreModel) -> Result<DVector<f64>>,
) -> Result<Vec<DVector<f64>>> {
    data.dataset
        .subjects()
        .iter()
        .map(|s| method(&s.samples, model))
        .collect()
}

/// Per-order function and component MSE averaged over processes.
fn aligned_rows(
    replicate: usize,
    method: &str,
    spec: &SimSpec,
    data: &SimData,
    model: &ScoreModel,
    scores: &[DVector<f64>],
) -> Result<Vec<BenchRow>> {
    let m_est = spec.n_components;
    let mut function_mse = vec![0.0; m_est];
    let mut component_mse = vec![0.0; m_est];
    for j in 0..spec.n_processes {
        let est: Vec<Vec<f64>> = (0..m_est)
            .map(|m| scores.iter().map(|x| x[j * m_est + m]).collect())
            .collect();
        let aligned = mse_aligned(
            &model.functions[j],
            &data.basis[..m_est],
            &est,
            &true_scores(data, spec, j),
        )?;
        for m in 0..m_est {
            function_mse[m] += aligned.functions[m] / spec.n_processes as f64;
            component_mse[m] += aligned.components[m] / spec.n_processes as f64;
        }
    }
    Ok((0..m_est)
        .map(|m| BenchRow {
            replicate,
            method: method.to_string(),
            n_subjects: spec.n_subjects,
            order: m + 1,
            function_mse: Some(function_mse[m]),
            component_mse: Some(component_mse[m]),
            mrse: None,
        })
        .collect())
}

fn run_replicates(
    simulation: &str,
    spec: &SimSpec,
    tasks: Vec<(usize, SimSpec)>,
    replicates: usize,
    body: impl Fn(usize, &SimSpec) -> Result<Vec<BenchRow>> + Sync,
) -> Result<BenchReport> {
    spec.validate()?;
    let start = Instant::now();
    let results: Vec<(usize, usize, Result<Vec<BenchRow>>)> =
        tasks.par_iter().map(|(r, s)| (*r, s.n_subjects, body(*r, s))).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (replicate, n_subjects, result) in results {
        match result {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                log::warn!("{simulation} replicate {replicate} (N = {n_subjects}) failed: {e}");
                failures.push(ReplicateFailure {
                    replicate,
                    n_subjects,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(BenchReport {
        simulation: simulation.to_string(),
        spec: spec.clone(),
        replicates,
        rows,
        failures,
        runtime: start.elapsed(),
    })
}

fn replicate_specs(spec: &SimSpec, replicates: usize) -> Vec<(usize, SimSpec)> {
    (0..replicates)
        .map(|r| {
            let mut s = spec.clone();
            s.seed = replicate_seed(spec.seed, r as u64);
            (r, s)
        })
        .collect()
}

/// BLUP against quadrature scoring on a fully connected orthogonal-mode fit.
pub fn run_sim1(spec: &SimSpec, replicates: usize) -> Result<BenchReport> {
    run_replicates("sim1", spec, replicate_specs(spec, replicates), replicates, |r, s| {
        let data = generate(s)?;
        let model = estimate_model(&data.dataset, &estimation_config(s))?;
        let fit = fit_higher_order(&model.operators(true), &solver_config(s))?;
        let score_model = ScoreModel::from_fit(&model, &fit)?;
        let blup = score_all(&data, &score_model, blup_scores)?;
        let quad = score_all(&data, &score_model, |smp, m| quadrature_scores(smp, m, None))?;
        let mut rows = aligned_rows(r, "blup", s, &data, &score_model, &blup)?;
        rows.extend(aligned_rows(r, "quadrature", s, &data, &score_model, &quad)?);
        Ok(rows)
    })
}

/// Leading `m` eigenfunctions of each self-covariance, L²-normalized and
/// sign-normalized; `out[m][j]`.
pub fn fpca_oracle(ops: &OperatorSet, m: usize) -> Vec<Vec<GridFunction>> {
    let per_process: Vec<Vec<GridFunction>> = (0..ops.n_processes())
        .map(|j| {
            let grid = ops.grid(j);
            let d = grid.sqrt_weights();
            let eig = SymmetricEigen::new(ops.upper(j, j).symmetrized_kernel());
            let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            idx.iter()
                .take(m)
                .map(|&c| unit_function(grid, eig.eigenvectors.column(c).component_div(&d)))
                .collect()
        })
        .collect();
    transpose_orders(per_process, m)
}

/// Leading `m` singular pairs of the cross-covariance between processes 0
/// and 1; `out[m] = [left, right]`.
pub fn fsvd_oracle(ops: &OperatorSet, m: usize) -> Vec<Vec<GridFunction>> {
    let (g0, g1) = (ops.grid(0), ops.grid(1));
    let (d0, d1) = (g0.sqrt_weights(), g1.sqrt_weights());
    let svd = ops.upper(0, 1).symmetrized_kernel().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    idx.iter()
        .take(m)
        .map(|&c| {
            vec![
                unit_function(g0, u.column(c).component_div(&d0)),
                unit_function(g1, v_t.row(c).transpose().component_div(&d1)),
            ]
        })
        .collect()
}

fn unit_function(grid: &Arc<TimeGrid>, mut v: DVector<f64>) -> GridFunction {
    apply_sign_convention(&mut v);
    let f = GridFunction::new(grid.clone(), v).expect("finite eigenvector");
    let n = f.norm();
    f.scaled(1.0 / n)
}

fn transpose_orders(per_process: Vec<Vec<GridFunction>>, m: usize) -> Vec<Vec<GridFunction>> {
    (0..m)
        .map(|c| per_process.iter().map(|fs| fs[c].clone()).collect())
        .collect()
}

/// FPCA, FSVD and FGCCA functions and BLUP components on two processes.
pub fn run_sim2(spec: &SimSpec, replicates: usize) -> Result<BenchReport> {
    if spec.n_processes != 2 {
        return Err(FgccaError::InvalidConfig(
            "the second simulation needs exactly 2 processes".into(),
        ));
    }
    run_replicates("sim2", spec, replicate_specs(spec, replicates), replicates, |r, s| {
        let data = generate(s)?;
        let model = estimate_model(&data.dataset, &estimation_config(s))?;
        let ops = model.operators(true);
        let fgcca = fit_higher_order(&ops, &solver_config(s))?;
        let fsvd = FgccaFit::from_functions(
            DeflationMode::Orthogonal,
            ops.grids().to_vec(),
            fsvd_oracle(&ops, s.n_components),
        )?;
        let fpca = FgccaFit::from_functions(
            DeflationMode::Orthogonal,
            ops.grids().to_vec(),
            fpca_oracle(&ops, s.n_components),
        )?;
        let mut rows = Vec::new();
        for (name, fit) in [("fpca", &fpca), ("fsvd", &fsvd), ("fgcca", &fgcca)] {
            let score_model = ScoreModel::from_fit(&model, fit)?;
            let scores = score_all(&data, &score_model, blup_scores)?;
            rows.extend(aligned_rows(r, name, s, &data, &score_model, &scores)?);
        }
        Ok(rows)
    })
}

/// Mean over subjects and processes of `∫(X̂ − X)² / ∫X²`.
pub fn mrse(data: &SimData, reconstructions: &[Vec<GridFunction>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (truth, rec) in data.trajectories.iter().zip(reconstructions) {
        for (x, xhat) in truth.iter().zip(rec) {
            let x = GridFunction::new(data.grid.clone(), x.clone())?;
            let diff = GridFunction::new(data.grid.clone(), xhat.values() - x.values())?;
            let denom = inner_product(&x, &x)?;
            if denom > 0.0 {
                total += inner_product(&diff, &diff)? / denom;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(FgccaError::NumericalFailure("every true trajectory is zero".into()));
    }
    Ok(total / count as f64)
}

/// Reconstruction error with `1..=M` components for each subject count.
pub fn run_sim3(spec: &SimSpec, replicates: usize, subject_counts: &[usize]) -> Result<BenchReport> {
    let counts: Vec<usize> = if subject_counts.is_empty() {
        vec![spec.n_subjects]
    } else {
        subject_counts.to_vec()
    };
    let mut tasks = Vec::new();
    for &n in &counts {
        let mut base = spec.clone();
        base.n_subjects = n;
        base.seed = replicate_seed(spec.seed, n as u64 + (1 << 32));
        tasks.extend(replicate_specs(&base, replicates));
    }
    run_replicates("sim3", spec, tasks, replicates, |r, s| {
        let data = generate(s)?;
        let model = estimate_model(&data.dataset, &estimation_config(s))?;
        let fit = fit_higher_order(&model.operators(true), &solver_config(s))?;
        let full = ScoreModel::from_fit(&model, &fit)?;
        let mut rows = Vec::with_capacity(s.n_components);
        for m in 1..=s.n_components {
            let sm = full.truncated(m)?;
            let grids = sm.grids();
            let recs: Vec<Vec<GridFunction>> = data
                .dataset
                .subjects()
                .iter()
                .map(|subj| {
                    let xi = blup_scores(&subj.samples, &sm)?;
                    reconstruct(&xi, ScoreBasis::Coefficients, &sm, &grids)
                })
                .collect::<Result<_>>()?;
            rows.push(BenchRow {
                replicate: r,
                method: "fgcca".into(),
                n_subjects: s.n_subjects,
                order: m,
                function_mse: None,
                component_mse: None,
                mrse: Some(mrse(&data, &recs)?),
            });
        }
        Ok(rows)
    })
}
