//! Block-coordinate ascent on the FGCCA criterion
//! `Ψ(f) = Σ_{j≠k} c_jk g(⟨f_j, Σ_jk f_k⟩)` under `⟨f_j, M_j f_j⟩ = 1`.
//!
//! Each sweep visits the processes in order `1..J`, always using the
//! freshest functions, and replaces `f_j` by `M_j^{-1}∇_j / ‖M_j^{-1/2}∇_j‖`.
//! For convex `g` every block update can only increase `Ψ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FgccaError, Result};
use crate::numerics::{weighted_dot, GridFunction, Metric, TimeGrid};
use crate::operators::OperatorSet;

/// The convex function `g` applied to each pairwise covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Horst: `g(x) = x`.
    Identity,
    /// Factorial: `g(x) = x²`.
    Square,
    /// Centroid: `g(x) = |x|`, with subgradient 0 at the origin.
    Abs,
}

impl Scheme {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Scheme::Identity => x,
            Scheme::Square => x * x,
            Scheme::Abs => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Scheme::Identity => 1.0,
            Scheme::Square => 2.0 * x,
            Scheme::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeflationMode {
    Orthogonal,
    Uncorrelated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Init {
    /// Leading left singular function of the maps connected to each process.
    DeterministicSvd,
    /// Gaussian white noise on the grid, seeded.
    Random { seed: u64 },
}

/// Solver settings. `design` is the connection matrix `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgccaConfig {
    pub design: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub scheme: Scheme,
    pub epsilon: f64,
    pub max_iters: usize,
    pub n_components: usize,
    pub deflation: DeflationMode,
    pub init: Init,
    pub sign_convention: bool,
}

impl FgccaConfig {
    /// Fully connected design, `τ = 1`, Horst scheme, one component.
    pub fn new(n_processes: usize) -> Self {
        Self {
            design: full_design(n_processes),
            tau: vec![1.0; n_processes],
            scheme: Scheme::Identity,
            epsilon: 1e-8,
            max_iters: 1000,
            n_components: 1,
            deflation: DeflationMode::Orthogonal,
            init: Init::DeterministicSvd,
            sign_convention: true,
        }
    }

    pub fn n_processes(&self) -> usize {
        self.design.len()
    }

    pub fn validate(&self, n_processes: usize) -> Result<()> {
        let bad = |m: String| Err(FgccaError::InvalidConfig(m));
        if self.design.len() != n_processes || self.design.iter().any(|r| r.len() != n_processes) {
            return bad(format!("design must be {n_processes}x{n_processes}"));
        }
        for j in 0..n_processes {
            if self.design[j][j] != 0.0 {
                return bad("design diagonal must be zero".into());
            }
            for k in 0..n_processes {
                let c = self.design[j][k];
                if !c.is_finite() || c < 0.0 {
                    return bad("design entries must be finite and nonnegative".into());
                }
                if c != self.design[k][j] {
                    return bad("design must be symmetric".into());
                }
            }
        }
        if self.tau.len() != n_processes {
            return bad(format!("{} tau values for {n_processes} processes", self.tau.len()));
        }
        if self.tau.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("τ must lie in (0,1]".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.n_components == 0 {
            return bad("n_components must be at least 1".into());
        }
        Ok(())
    }
}

pub fn full_design(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| (0..n).map(|k| if j == k { 0.0 } else { 1.0 }).collect())
        .collect()
}

/// Functions and convergence record of one run of the ascent.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub functions: Vec<GridFunction>,
    /// `Ψ` at the start and after every sweep.
    pub criterion_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Processes that met an exactly-zero gradient and kept their function.
    pub stationary: Vec<usize>,
}

/// Criterion `Ψ`; each unordered pair contributes twice.
pub fn criterion(functions: &[GridFunction], ops: &OperatorSet, design: &[Vec<f64>], scheme: Scheme) -> f64 {
    let values: Vec<&DVector<f64>> = functions.iter().map(|f| f.values()).collect();
    Engine::new(ops, design, scheme, None).criterion(&values, None)
}

/// `∇_j Ψ = 2 Σ_{k≠j} c_jk g'(⟨f_j, Σ_jk f_k⟩) Σ_jk f_k`.
pub fn gradient(
    j: usize,
    functions: &[GridFunction],
    ops: &OperatorSet,
    design: &[Vec<f64>],
    scheme: Scheme,
) -> GridFunction {
    let values: Vec<&DVector<f64>> = functions.iter().map(|f| f.values()).collect();
    let g = Engine::new(ops, design, scheme, None).gradient(j, &values, None);
    GridFunction::from_parts_unchecked(ops.grid(j).clone(), g)
}

/// `M^{-1}∇ / √⟨∇, M^{-1}∇⟩`; a zero gradient is a stationary-point error.
pub fn update(gradient: &GridFunction, metric: &Metric) -> Result<GridFunction> {
    let x = crate::numerics::solve_metric(metric, gradient)?;
    let norm_sq = weighted_dot(gradient.grid().weights(), gradient.values(), x.values());
    if !(norm_sq > 0.0) || !norm_sq.is_finite() {
        return Err(FgccaError::Stationary {
            process: metric.process(),
        });
    }
    Ok(x.scaled(1.0 / norm_sq.sqrt()))
}

/// `M_j = τ_j I + (1 − τ_j) Σ_jj`.
pub fn build_metric(j: usize, tau: f64, ops: &OperatorSet) -> Result<Metric> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(FgccaError::InvalidConfig("τ must lie in (0,1]".into()));
    }
    if tau == 1.0 {
        return Metric::identity(j, ops.grid(j).clone());
    }
    Metric::new(j, tau, 1.0 - tau, ops.upper(j, j))
}

pub fn build_metrics(config: &FgccaConfig, ops: &OperatorSet) -> Result<Vec<Metric>> {
    (0..ops.n_processes())
        .map(|j| build_metric(j, config.tau[j], ops))
        .collect()
}

/// Runs the ascent from the initialization named in `config`.
pub fn fit_single(ops: &OperatorSet, config: &FgccaConfig) -> Result<SolverState> {
    config.validate(ops.n_processes())?;
    let metrics = build_metrics(config, ops)?;
    let engine = Engine::new(ops, &config.design, config.scheme, None);
    let start = engine.initial_functions(config.init, &metrics);
    let run = engine.run(&metrics, start, None, config.epsilon, config.max_iters)?;
    Ok(run.into_state(ops.grids(), config.sign_convention))
}

/// Runs the ascent from explicit starting functions, rescaled onto the
/// constraint set first.
pub fn fit_from(ops: &OperatorSet, config: &FgccaConfig, start: &[GridFunction]) -> Result<SolverState> {
    config.validate(ops.n_processes())?;
    if start.len() != ops.n_processes() {
        return Err(FgccaError::Dimension(format!(
            "{} starting functions for {} processes",
            start.len(),
            ops.n_processes()
        )));
    }
    let metrics = build_metrics(config, ops)?;
    let mut f0 = Vec::with_capacity(start.len());
    for (j, f) in start.iter().enumerate() {
        if !f.grid().matches(ops.grid(j)) {
            return Err(FgccaError::IncompatibleGrid(format!("starting function {}", j + 1)));
        }
        f0.push(metric_normalize(f.values().clone(), &metrics[j])?);
    }
    let engine = Engine::new(ops, &config.design, config.scheme, None);
    let run = engine.run(&metrics, f0, None, config.epsilon, config.max_iters)?;
    Ok(run.into_state(ops.grids(), config.sign_convention))
}

fn metric_normalize(v: DVector<f64>, metric: &Metric) -> Result<DVector<f64>> {
    let q = metric.quadratic_form(&v);
    if !(q > 0.0) || !q.is_finite() {
        return Err(FgccaError::NumericalFailure(format!(
            "cannot normalize starting function {}",
            metric.process() + 1
        )));
    }
    Ok(v / q.sqrt())
}

/// Flips `v` so that its entry of largest magnitude is positive.
pub fn apply_sign_convention(v: &mut DVector<f64>) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Response-side data for the extended criterion: one `G_j × p` kernel per
/// process, applied with plain Euclidean sums on the response side.
pub(crate) struct ResponseKernels<'a> {
    pub kernels: &'a [DMatrix<f64>],
}

pub(crate) struct Engine<'a> {
    ops: &'a OperatorSet,
    design: &'a [Vec<f64>],
    scheme: Scheme,
    response: Option<ResponseKernels<'a>>,
}

pub(crate) struct RunResult {
    pub functions: Vec<DVector<f64>>,
    pub weights: Option<DVector<f64>>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stationary: Vec<usize>,
}

impl RunResult {
    pub fn into_state(self, grids: &[Arc<TimeGrid>], sign_convention: bool) -> SolverState {
        let functions = self
            .functions
            .into_iter()
            .zip(grids)
            .map(|(mut v, g)| {
                if sign_convention {
                    apply_sign_convention(&mut v);
                }
                GridFunction::from_parts_unchecked(g.clone(), v)
            })
            .collect();
        SolverState {
            functions,
            criterion_trace: self.trace,
            iterations: self.iterations,
            converged: self.converged,
            stationary: self.stationary,
        }
    }
}

impl<'a> Engine<'a> {
    /// A response block whose kernels are all zero is dropped, so the
    /// extended problem reduces to the plain one exactly.
    pub fn new(
        ops: &'a OperatorSet,
        design: &'a [Vec<f64>],
        scheme: Scheme,
        response: Option<ResponseKernels<'a>>,
    ) -> Self {
        let response = response.filter(|r| r.kernels.iter().any(|k| k.iter().any(|&x| x != 0.0)));
        Self {
            ops,
            design,
            scheme,
            response,
        }
    }

    fn n(&self) -> usize {
        self.ops.n_processes()
    }

    fn response_inner(&self, j: usize, f: &DVector<f64>, a: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let r = self.response.as_ref()?;
        let ka = &r.kernels[j] * a;
        Some((weighted_dot(self.ops.grid(j).weights(), f, &ka), ka))
    }

    pub fn criterion(&self, f: &[&DVector<f64>], a: Option<&DVector<f64>>) -> f64 {
        let mut psi = 0.0;
        for j in 0..self.n() {
            for k in 0..self.n() {
                let c = self.design[j][k];
                if j == k || c == 0.0 {
                    continue;
                }
                psi += c * self.scheme.value(self.ops.bilinear(j, f[j], k, f[k]));
            }
        }
        if let Some(a) = a {
            for j in 0..self.n() {
                if let Some((x, _)) = self.response_inner(j, f[j], a) {
                    psi += 2.0 * self.scheme.value(x);
                }
            }
        }
        psi
    }

    pub fn gradient(&self, j: usize, f: &[&DVector<f64>], a: Option<&DVector<f64>>) -> DVector<f64> {
        let mut g = DVector::zeros(self.ops.grid(j).len());
        for k in 0..self.n() {
            let c = self.design[j][k];
            if k == j || c == 0.0 {
                continue;
            }
            let sf = self.ops.apply(j, k, f[k]);
            let x = weighted_dot(self.ops.grid(j).weights(), f[j], &sf);
            g += sf * (2.0 * c * self.scheme.derivative(x));
        }
        if let Some(a) = a {
            if let Some((x, ka)) = self.response_inner(j, f[j], a) {
                g += ka * (2.0 * self.scheme.derivative(x));
            }
        }
        g
    }

    /// `2 Σ_j g'(⟨f_j, Σ_jY a⟩) Σ_jYᵀ f_j`.
    pub fn response_gradient(&self, f: &[&DVector<f64>], a: &DVector<f64>) -> Option<DVector<f64>> {
        let r = self.response.as_ref()?;
        let mut g = DVector::zeros(a.len());
        for (j, fj) in f.iter().enumerate() {
            let (x, _) = self.response_inner(j, fj, a)?;
            let wf = DVector::from_iterator(fj.len(), fj.iter().zip(self.ops.grid(j).weights()).map(|(v, w)| v * w));
            g += r.kernels[j].tr_mul(&wf) * (2.0 * self.scheme.derivative(x));
        }
        Some(g)
    }

    /// `a⁰ ∝ Σ_j Σ_jYᵀ f_j`, or the first coordinate vector when that is zero.
    pub fn initial_response_weights(&self, f: &[DVector<f64>]) -> Option<DVector<f64>> {
        let r = self.response.as_ref()?;
        let p = r.kernels.first()?.ncols();
        let mut g = DVector::zeros(p);
        for (j, fj) in f.iter().enumerate() {
            let wf = DVector::from_iterator(fj.len(), fj.iter().zip(self.ops.grid(j).weights()).map(|(v, w)| v * w));
            g += r.kernels[j].tr_mul(&wf);
        }
        let n = g.norm();
        if n > 0.0 && n.is_finite() {
            Some(g / n)
        } else {
            let mut e = DVector::zeros(p);
            e[0] = 1.0;
            Some(e)
        }
    }

    pub fn has_response(&self) -> bool {
        self.response.is_some()
    }

    pub fn initial_functions(&self, init: Init, metrics: &[Metric]) -> Vec<DVector<f64>> {
        match init {
            Init::DeterministicSvd => (0..self.n())
                .map(|j| {
                    let mut v = self.leading_left_singular(j);
                    apply_sign_convention(&mut v);
                    let q = metrics[j].quadratic_form(&v);
                    v / q.sqrt()
                })
                .collect(),
            Init::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.n())
                    .map(|j| {
                        let v = DVector::from_iterator(
                            self.ops.grid(j).len(),
                            (0..self.ops.grid(j).len()).map(|_| StandardNormal.sample(&mut rng)),
                        );
                        let q = metrics[j].quadratic_form(&v);
                        v / q.sqrt()
                    })
                    .collect()
            }
        }
    }

    /// Leading eigenvector of `Σ_k A_k A_kᵀ` in orthonormal coordinates,
    /// where `A_k` runs over the operators connected to process `j`;
    /// the constant function when nothing is connected.
    fn leading_left_singular(&self, j: usize) -> DVector<f64> {
        let grid = self.ops.grid(j);
        let g = grid.len();
        let dj = grid.sqrt_weights();
        let mut gram = DMatrix::<f64>::zeros(g, g);
        for k in 0..self.n() {
            if k == j || self.design[j][k] == 0.0 {
                continue;
            }
            let a = self.ops.get(j, k).symmetrized_kernel();
            gram += &a * a.transpose();
        }
        if let Some(r) = &self.response {
            let mut a = r.kernels[j].clone();
            for (row, d) in dj.iter().enumerate() {
                a.row_mut(row).scale_mut(*d);
            }
            gram += &a * a.transpose();
        }
        if gram.amax() == 0.0 {
            return DVector::from_element(g, 1.0);
        }
        let eig = nalgebra::SymmetricEigen::new(gram);
        let top = eig.eigenvalues.imax();
        let u = eig.eigenvectors.column(top).into_owned();
        u.component_div(&dj)
    }

    pub fn run(
        &self,
        metrics: &[Metric],
        mut f: Vec<DVector<f64>>,
        mut a: Option<DVector<f64>>,
        epsilon: f64,
        max_iters: usize,
    ) -> Result<RunResult> {
        if !self.has_response() {
            a = None;
        }
        let eval = |f: &[DVector<f64>], a: Option<&DVector<f64>>| -> Result<f64> {
            let refs: Vec<&DVector<f64>> = f.iter().collect();
            let psi = self.criterion(&refs, a);
            if psi.is_finite() {
                Ok(psi)
            } else {
                Err(FgccaError::NumericalFailure("criterion is not finite".into()))
            }
        };
        let mut psi = eval(&f, a.as_ref())?;
        let mut trace = vec![psi];
        let mut stationary = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for sweep in 1..=max_iters {
            for j in 0..self.n() {
                let grad = {
                    let refs: Vec<&DVector<f64>> = f.iter().collect();
                    self.gradient(j, &refs, a.as_ref())
                };
                let x = metrics[j].solve_values(&grad);
                let norm_sq = weighted_dot(self.ops.grid(j).weights(), &grad, &x);
                if !(norm_sq > 0.0) {
                    if !stationary.contains(&j) {
                        stationary.push(j);
                    }
                    continue;
                }
                if !norm_sq.is_finite() {
                    return Err(FgccaError::NumericalFailure(format!(
                        "non-finite update for process {}",
                        j + 1
                    )));
                }
                f[j] = x / norm_sq.sqrt();
            }
            if let Some(cur) = a.as_ref() {
                let refs: Vec<&DVector<f64>> = f.iter().collect();
                if let Some(g) = self.response_gradient(&refs, cur) {
                    let n = g.norm();
                    if n > 0.0 && n.is_finite() {
                        a = Some(g / n);
                    }
                }
            }
            let next = eval(&f, a.as_ref())?;
            trace.push(next);
            iterations = sweep;
            if next - psi < epsilon {
                converged = true;
                break;
            }
            psi = next;
        }
        Ok(RunResult {
            functions: f,
            weights: a,
            trace,
            iterations,
            converged,
            stationary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inner_product, GridOperator};

    fn grid(n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(0.0, 1.0, n).unwrap())
    }

    fn unit(g: &Arc<TimeGrid>, f: impl Fn(f64) -> f64) -> GridFunction {
        let h = GridFunction::from_fn(g.clone(), f);
        let n = h.norm();
        h.scaled(1.0 / n)
    }

    /// J = 2 set whose cross operator is `σ u vᵀ` and whose self operators
    /// are `u uᵀ`, `v vᵀ`.
    fn rank_one_pair(sigma: f64) -> (OperatorSet, GridFunction, GridFunction) {
        let g = grid(31);
        let u = unit(&g, |t| 1.0 + t);
        let v = unit(&g, |t| (3.0 * t).sin() + 0.2);
        let ops = OperatorSet::from_upper(
            vec![g.clone(), g.clone()],
            vec![
                GridOperator::rank_one(&u, &u, 1.0),
                GridOperator::rank_one(&u, &v, sigma),
                GridOperator::rank_one(&v, &v, 1.0),
            ],
        )
        .unwrap();
        (ops, u, v)
    }

    #[test]
    fn criterion_counts_each_pair_twice() {
        let (ops, u, v) = rank_one_pair(0.7);
        let design = full_design(2);
        let psi = criterion(&[u.clone(), v.clone()], &ops, &design, Scheme::Identity);
        assert!((psi - 1.4).abs() < 1e-12);
        let zero = vec![vec![0.0; 2]; 2];
        assert_eq!(criterion(&[u, v], &ops, &zero, Scheme::Identity), 0.0);
    }

    #[test]
    fn criterion_square_scheme_three_blocks() {
        let g = grid(21);
        let u = unit(&g, |t| 2.0 - t);
        let ops = OperatorSet::from_fn(vec![g.clone(); 3], |_, _| Ok(GridOperator::rank_one(&u, &u, 0.5))).unwrap();
        let f = vec![u.clone(), u.clone(), u];
        let psi = criterion(&f, &ops, &full_design(3), Scheme::Square);
        assert!((psi - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_identity_scheme_is_twice_the_action() {
        let (ops, u, v) = rank_one_pair(0.9);
        let g1 = gradient(0, &[u.clone(), v.clone()], &ops, &full_design(2), Scheme::Identity);
        let expected = crate::numerics::apply_operator(&ops.get(0, 1), &v).unwrap();
        assert!((g1.values() - expected.values() * 2.0).amax() < 1e-12);
        let g0 = gradient(0, &[u, v], &ops, &vec![vec![0.0; 2]; 2], Scheme::Identity);
        assert_eq!(g0.values().amax(), 0.0);
    }

    #[test]
    fn abs_scheme_has_zero_subgradient_at_origin() {
        assert_eq!(Scheme::Abs.derivative(0.0), 0.0);
        assert_eq!(Scheme::Abs.derivative(-2.0), -1.0);
    }

    #[test]
    fn update_with_identity_metric_normalizes() {
        let g = grid(25);
        let grad = GridFunction::from_fn(g.clone(), |t| 3.0 * t - 1.0);
        let m = Metric::identity(0, g.clone()).unwrap();
        let x = update(&grad, &m).unwrap();
        let expected = grad.scaled(1.0 / grad.norm());
        assert!((x.values() - expected.values()).amax() < 1e-14);
        // fixed point
        let again = update(&x, &m).unwrap();
        assert!((again.values() - x.values()).amax() < 1e-14);
        let zero = GridFunction::zeros(g);
        assert!(matches!(update(&zero, &m), Err(FgccaError::Stationary { .. })));
    }

    #[test]
    fn metric_examples() {
        let g = grid(15);
        let u = unit(&g, |t| t * t + 0.3);
        let zero_ops =
            OperatorSet::from_upper(vec![g.clone()], vec![GridOperator::zeros(g.clone(), g.clone())]).unwrap();
        let m1 = build_metric(0, 1.0, &zero_ops).unwrap();
        assert!(m1.is_identity());
        let half = build_metric(0, 0.5, &zero_ops).unwrap();
        let f = GridFunction::from_fn(g.clone(), |t| t.cos());
        assert!((half.apply(&f).unwrap().values() - f.values() * 0.5).amax() < 1e-15);

        let ops = OperatorSet::from_upper(vec![g.clone()], vec![GridOperator::rank_one(&u, &u, 2.0)]).unwrap();
        let m = build_metric(0, 0.5, &ops).unwrap();
        // dense assembly: 0.5 I + 0.5 K W
        let w = DMatrix::from_diagonal(&DVector::from_vec(g.weights().to_vec()));
        let dense = DMatrix::identity(15, 15) * 0.5 + ops.upper(0, 0).kernel() * &w * 0.5;
        let expected = &dense * f.values();
        assert!((m.apply(&f).unwrap().values() - expected).amax() < 1e-12);
        assert!(build_metric(0, 0.0, &ops).is_err());
    }

    #[test]
    fn rank_one_pair_converges_to_singular_pair() {
        let (ops, u, v) = rank_one_pair(1.3);
        let mut cfg = FgccaConfig::new(2);
        cfg.init = Init::Random { seed: 3 };
        let st = fit_single(&ops, &cfg).unwrap();
        assert!(st.converged);
        assert!(st.iterations <= 2, "took {} sweeps", st.iterations);
        let c1 = inner_product(&st.functions[0], &u).unwrap().abs();
        let c2 = inner_product(&st.functions[1], &v).unwrap().abs();
        assert!((c1 - 1.0).abs() < 1e-12 && (c2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn starting_at_solution_converges_in_one_sweep() {
        let (ops, u, v) = rank_one_pair(0.8);
        let cfg = FgccaConfig::new(2);
        let st = fit_from(&ops, &cfg, &[u, v]).unwrap();
        assert_eq!(st.iterations, 1);
        assert!(st.converged);
        assert!((st.criterion_trace[1] - st.criterion_trace[0]).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FgccaConfig::new(2);
        cfg.tau = vec![0.0, 1.0];
        let err = cfg.validate(2).unwrap_err();
        assert!(err.to_string().contains("τ must lie in (0,1]"));
        let mut cfg = FgccaConfig::new(2);
        cfg.design[0][1] = 2.0;
        assert!(cfg.validate(2).is_err());
        let mut cfg = FgccaConfig::new(2);
        cfg.design[0][0] = 1.0;
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let mut v = DVector::from_vec(vec![0.1, -3.0, 2.0]);
        apply_sign_convention(&mut v);
        assert_eq!(v[1], 3.0);
    }
}
