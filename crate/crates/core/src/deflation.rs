//! Higher-order canonical functions by deflating the operators themselves.
//!
//! Both modes are two-sided rank-one updates of every kernel
//! `K' = (I − d_j p_j⟨f_j,·⟩) K (I − d_k f_k⟨p_k,·⟩)` where
//! orthogonal mode uses `p = f, d = 1` and uncorrelated mode uses
//! `p = Σ_jj f_j, d = 1/⟨f_j, Σ_jj f_j⟩`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FgccaError, Result};
use crate::numerics::{weighted_dot, GridFunction, GridOperator, TimeGrid};
use crate::operators::OperatorSet;
use crate::solver::{build_metrics, DeflationMode, Engine, FgccaConfig, Init, ResponseKernels};

const UNIT_TOLERANCE: f64 = 1e-8;

/// The functions and scalars used to deflate after order `order`.
#[derive(Debug, Clone)]
pub struct DeflationStep {
    pub order: usize,
    pub mode: DeflationMode,
    pub functions: Vec<GridFunction>,
    /// `1/⟨f_j, Σ_jj f_j⟩` per process, uncorrelated mode only.
    pub d: Option<Vec<f64>>,
}

/// One side of a two-sided projection.
struct Side<'a> {
    f: &'a DVector<f64>,
    p: DVector<f64>,
    d: f64,
    weights: &'a [f64],
}

fn project_kernel(kernel: &DMatrix<f64>, left: &Side, right: &Side) -> DMatrix<f64> {
    let wf_left = weighted(left.f, left.weights);
    let wf_right = weighted(right.f, right.weights);
    let a = kernel.tr_mul(&wf_left);
    let b = kernel * &wf_right;
    let c = wf_left.dot(&b);
    let mut out = kernel.clone();
    out.ger(-left.d, &left.p, &a, 1.0);
    out.ger(-right.d, &b, &right.p, 1.0);
    out.ger(left.d * right.d * c, &left.p, &right.p, 1.0);
    out
}

fn weighted(f: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    DVector::from_iterator(f.len(), f.iter().zip(w).map(|(v, w)| v * w))
}

fn orthogonal_side<'a>(process: usize, f: &'a GridFunction) -> Result<Side<'a>> {
    let norm_sq = weighted_dot(f.grid().weights(), f.values(), f.values());
    if (norm_sq - 1.0).abs() > UNIT_TOLERANCE {
        return Err(FgccaError::Normalization { process, norm_sq });
    }
    Ok(Side {
        f: f.values(),
        p: f.values().clone(),
        d: 1.0,
        weights: f.grid().weights(),
    })
}

fn uncorrelated_side<'a>(process: usize, sigma: &GridOperator, f: &'a GridFunction) -> Result<Side<'a>> {
    if !sigma.row_grid().matches(f.grid()) || !sigma.col_grid().matches(f.grid()) {
        return Err(FgccaError::IncompatibleGrid(format!(
            "self-covariance of process {} and its function",
            process + 1
        )));
    }
    let p = sigma.apply_values(f.values());
    let value = weighted_dot(f.grid().weights(), f.values(), &p);
    let scale = sigma.kernel().amax() * f.grid().length() * weighted_dot(f.grid().weights(), f.values(), f.values());
    if !(value > f64::EPSILON * scale) || !value.is_finite() {
        return Err(FgccaError::DegenerateComponent { process, value });
    }
    Ok(Side {
        f: f.values(),
        p,
        d: 1.0 / value,
        weights: f.grid().weights(),
    })
}

fn check_pair(op: &GridOperator, f_j: &GridFunction, f_k: &GridFunction) -> Result<()> {
    if !op.row_grid().matches(f_j.grid()) || !op.col_grid().matches(f_k.grid()) {
        return Err(FgccaError::IncompatibleGrid("operator and deflation functions".into()));
    }
    Ok(())
}

/// `(I − Φ_j) Σ_jk (I − Φ_k)` for unit `f_j`, `f_k`. Normalization errors
/// report the left function as process 0 and the right one as process 1.
pub fn deflate_orthogonal(op: &GridOperator, f_j: &GridFunction, f_k: &GridFunction) -> Result<GridOperator> {
    check_pair(op, f_j, f_k)?;
    let left = orthogonal_side(0, f_j)?;
    let right = orthogonal_side(1, f_k)?;
    Ok(GridOperator::from_parts_unchecked(
        op.row_grid().clone(),
        op.col_grid().clone(),
        project_kernel(op.kernel(), &left, &right),
    ))
}

/// `(I − d_j Σ_jj Φ_j) Σ_jk (I − d_k Φ_k Σ_kk)` with `d = 1/⟨f, Σ f⟩`.
pub fn deflate_uncorrelated(
    op: &GridOperator,
    sigma_jj: &GridOperator,
    sigma_kk: &GridOperator,
    f_j: &GridFunction,
    f_k: &GridFunction,
) -> Result<GridOperator> {
    check_pair(op, f_j, f_k)?;
    let left = uncorrelated_side(0, sigma_jj, f_j)?;
    let right = uncorrelated_side(1, sigma_kk, f_k)?;
    Ok(GridOperator::from_parts_unchecked(
        op.row_grid().clone(),
        op.col_grid().clone(),
        project_kernel(op.kernel(), &left, &right),
    ))
}

fn sides<'a>(ops: &OperatorSet, functions: &'a [GridFunction], mode: DeflationMode) -> Result<Vec<Side<'a>>> {
    functions
        .iter()
        .enumerate()
        .map(|(j, f)| match mode {
            DeflationMode::Orthogonal => orthogonal_side(j, f),
            DeflationMode::Uncorrelated => uncorrelated_side(j, ops.upper(j, j), f),
        })
        .collect()
}

/// Deflates every pair `(j, k)`, self-covariances included, using the
/// operators as they were before this step.
pub fn deflate_set(
    ops: &OperatorSet,
    functions: &[GridFunction],
    mode: DeflationMode,
    order: usize,
) -> Result<(OperatorSet, DeflationStep)> {
    let (next, step, _) = deflate_all(ops, functions, mode, order, None)?;
    Ok((next, step))
}

/// Deflated operators, the step record and deflated response kernels.
type Deflated = (OperatorSet, DeflationStep, Option<Vec<DMatrix<f64>>>);

fn deflate_all(
    ops: &OperatorSet,
    functions: &[GridFunction],
    mode: DeflationMode,
    order: usize,
    response: Option<&[DMatrix<f64>]>,
) -> Result<Deflated> {
    let sides = sides(ops, functions, mode)?;
    let next = OperatorSet::from_fn(ops.grids().to_vec(), |j, k| {
        let op = ops.upper(j, k);
        Ok(GridOperator::from_parts_unchecked(
            op.row_grid().clone(),
            op.col_grid().clone(),
            project_kernel(op.kernel(), &sides[j], &sides[k]),
        ))
    })?;
    let response = response.map(|kernels| {
        kernels
            .iter()
            .zip(&sides)
            .map(|(kernel, side)| {
                let a = kernel.tr_mul(&weighted(side.f, side.weights));
                let mut out = kernel.clone();
                out.ger(-side.d, &side.p, &a, 1.0);
                out
            })
            .collect()
    });
    let d = match mode {
        DeflationMode::Orthogonal => None,
        DeflationMode::Uncorrelated => Some(sides.iter().map(|s| s.d).collect()),
    };
    let step = DeflationStep {
        order,
        mode,
        functions: functions.to_vec(),
        d,
    };
    Ok((next, step, response))
}

/// Result of one order of the fit.
#[derive(Debug, Clone)]
pub struct OrderFit {
    pub order: usize,
    /// Canonical functions, L²-normalized and sign-normalized.
    pub functions: Vec<GridFunction>,
    pub criterion_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stationary: Vec<usize>,
    pub d: Option<Vec<f64>>,
    pub response_weights: Option<DVector<f64>>,
}

/// Canonical functions for orders `1..M`.
#[derive(Debug, Clone)]
pub struct FgccaFit {
    pub mode: DeflationMode,
    pub grids: Vec<Arc<TimeGrid>>,
    pub orders: Vec<OrderFit>,
}

impl FgccaFit {
    /// Wraps externally computed functions, `functions[m][j]`, as a fit
    /// with empty convergence records.
    pub fn from_functions(
        mode: DeflationMode,
        grids: Vec<Arc<TimeGrid>>,
        functions: Vec<Vec<GridFunction>>,
    ) -> Result<Self> {
        let mut orders = Vec::with_capacity(functions.len());
        for (m, fs) in functions.into_iter().enumerate() {
            if fs.len() != grids.len() || fs.iter().zip(&grids).any(|(f, g)| !f.grid().matches(g)) {
                return Err(FgccaError::Dimension(format!(
                    "order {} does not match the grids",
                    m + 1
                )));
            }
            orders.push(OrderFit {
                order: m + 1,
                functions: fs,
                criterion_trace: Vec::new(),
                iterations: 0,
                converged: true,
                stationary: Vec::new(),
                d: None,
                response_weights: None,
            });
        }
        Ok(Self { mode, grids, orders })
    }

    pub fn n_components(&self) -> usize {
        self.orders.len()
    }

    pub fn n_processes(&self) -> usize {
        self.grids.len()
    }

    /// `f_j^m` with zero-based `order` and `process`.
    pub fn function(&self, order: usize, process: usize) -> &GridFunction {
        &self.orders[order].functions[process]
    }

    pub fn process_functions(&self, process: usize) -> Vec<&GridFunction> {
        self.orders.iter().map(|o| &o.functions[process]).collect()
    }

    pub fn to_bundle(&self) -> FitBundle {
        FitBundle {
            version: FIT_BUNDLE_VERSION,
            mode: self.mode,
            grids: self.grids.iter().map(|g| g.points().to_vec()).collect(),
            orders: self
                .orders
                .iter()
                .map(|o| OrderBundle {
                    order: o.order,
                    functions: o.functions.iter().map(|f| f.values().as_slice().to_vec()).collect(),
                    criterion_trace: o.criterion_trace.clone(),
                    iterations: o.iterations,
                    converged: o.converged,
                    stationary: o.stationary.iter().map(|j| j + 1).collect(),
                    d: o.d.clone(),
                    response_weights: o.response_weights.as_ref().map(|a| a.as_slice().to_vec()),
                })
                .collect(),
        }
    }

    pub fn from_bundle(bundle: &FitBundle) -> Result<Self> {
        if bundle.version != FIT_BUNDLE_VERSION {
            return Err(FgccaError::Schema(format!(
                "unsupported fit version {}",
                bundle.version
            )));
        }
        let grids: Vec<Arc<TimeGrid>> = bundle
            .grids
            .iter()
            .map(|p| TimeGrid::new(p.clone()).map(Arc::new))
            .collect::<Result<_>>()?;
        let mut orders = Vec::with_capacity(bundle.orders.len());
        for o in &bundle.orders {
            if o.functions.len() != grids.len() {
                return Err(FgccaError::Schema(format!(
                    "order {} has the wrong process count",
                    o.order
                )));
            }
            let functions = o
                .functions
                .iter()
                .zip(&grids)
                .map(|(v, g)| GridFunction::new(g.clone(), DVector::from_vec(v.clone())))
                .collect::<Result<_>>()?;
            orders.push(OrderFit {
                order: o.order,
                functions,
                criterion_trace: o.criterion_trace.clone(),
                iterations: o.iterations,
                converged: o.converged,
                stationary: o.stationary.iter().map(|j| j.saturating_sub(1)).collect(),
                d: o.d.clone(),
                response_weights: o.response_weights.clone().map(DVector::from_vec),
            });
        }
        Ok(Self {
            mode: bundle.mode,
            grids,
            orders,
        })
    }
}

pub const FIT_BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitBundle {
    pub version: u32,
    pub mode: DeflationMode,
    pub grids: Vec<Vec<f64>>,
    pub orders: Vec<OrderBundle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderBundle {
    pub order: usize,
    pub functions: Vec<Vec<f64>>,
    pub criterion_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stationary: Vec<usize>,
    pub d: Option<Vec<f64>>,
    pub response_weights: Option<Vec<f64>>,
}

/// Fits orders `1..M`, deflating all operators between orders.
pub fn fit_higher_order(ops: &OperatorSet, config: &FgccaConfig) -> Result<FgccaFit> {
    fit_orders(ops, config, None)
}

fn l2_normalize(process: usize, f: GridFunction) -> Result<GridFunction> {
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(FgccaError::Normalization {
            process,
            norm_sq: norm * norm,
        });
    }
    Ok(f.scaled(1.0 / norm))
}

pub(crate) fn fit_orders(
    ops: &OperatorSet,
    config: &FgccaConfig,
    response: Option<Vec<DMatrix<f64>>>,
) -> Result<FgccaFit> {
    config.validate(ops.n_processes())?;
    let mut current = ops.clone();
    let mut kernels = response;
    let mut orders = Vec::with_capacity(config.n_components);
    for m in 1..=config.n_components {
        let at_order = |e: FgccaError| FgccaError::OrderFailure {
            order: m,
            source: Box::new(e),
        };
        let init = match config.init {
            Init::Random { seed } => Init::Random {
                seed: seed.wrapping_add(m as u64 - 1),
            },
            other => other,
        };
        let metrics = build_metrics(config, &current).map_err(at_order)?;
        let engine = Engine::new(
            &current,
            &config.design,
            config.scheme,
            kernels.as_deref().map(|k| ResponseKernels { kernels: k }),
        );
        let f0 = engine.initial_functions(init, &metrics);
        let a0 = engine.initial_response_weights(&f0);
        let run = engine
            .run(&metrics, f0, a0, config.epsilon, config.max_iters)
            .map_err(at_order)?;
        let weights = run.weights.clone();
        let state = run.into_state(current.grids(), config.sign_convention);
        if !state.converged {
            log::warn!("order {m} stopped after {} sweeps without converging", state.iterations);
        }
        for &j in &state.stationary {
            log::warn!("order {m}: process {} met a zero gradient", j + 1);
        }
        let functions: Vec<GridFunction> = state
            .functions
            .into_iter()
            .enumerate()
            .map(|(j, f)| l2_normalize(j, f))
            .collect::<Result<_>>()
            .map_err(at_order)?;
        let mut d = None;
        if m < config.n_components {
            let (next, step, next_kernels) =
                deflate_all(&current, &functions, config.deflation, m, kernels.as_deref()).map_err(at_order)?;
            current = next;
            kernels = next_kernels;
            d = step.d;
        } else if config.deflation == DeflationMode::Uncorrelated {
            d = Some(
                sides(&current, &functions, DeflationMode::Uncorrelated)
                    .map_err(at_order)?
                    .iter()
                    .map(|s| s.d)
                    .collect(),
            );
        }
        orders.push(OrderFit {
            order: m,
            functions,
            criterion_trace: state.criterion_trace,
            iterations: state.iterations,
            converged: state.converged,
            stationary: state.stationary,
            d,
            response_weights: weights,
        });
    }
    Ok(FgccaFit {
        mode: config.deflation,
        grids: ops.grids().to_vec(),
        orders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{apply_operator, inner_product};
    use crate::solver::fit_single;

    fn grid(n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(0.0, 1.0, n).unwrap())
    }

    fn unit(g: &Arc<TimeGrid>, f: impl Fn(f64) -> f64) -> GridFunction {
        let h = GridFunction::from_fn(g.clone(), f);
        let n = h.norm();
        h.scaled(1.0 / n)
    }

    fn random_operator(g: &Arc<TimeGrid>, seed: u64) -> GridOperator {
        let n = g.len();
        let m = DMatrix::from_fn(n, n, |a, b| {
            ((a * 31 + b * 17 + seed as usize * 7) % 23) as f64 / 23.0 - 0.4
        });
        GridOperator::new(g.clone(), g.clone(), m).unwrap()
    }

    fn spd_operator(g: &Arc<TimeGrid>, seed: u64) -> GridOperator {
        let r = random_operator(g, seed);
        let k = r.kernel() * r.kernel().transpose() / g.len() as f64;
        GridOperator::new(g.clone(), g.clone(), k).unwrap()
    }

    #[test]
    fn orthogonal_annihilation() {
        let g = grid(21);
        let op = random_operator(&g, 1);
        let fj = unit(&g, |t| 1.0 + t);
        let fk = unit(&g, |t| (2.0 * t).cos());
        let out = deflate_orthogonal(&op, &fj, &fk).unwrap();
        assert!(apply_operator(&out, &fk).unwrap().values().amax() < 1e-10);
        for s in 0..10 {
            let h = GridFunction::from_fn(g.clone(), |t| (t * (s as f64 + 1.0)).sin() + 0.1 * s as f64);
            let image = apply_operator(&out, &h).unwrap();
            assert!(inner_product(&fj, &image).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn rank_one_is_fully_deflated() {
        let g = grid(17);
        let u = unit(&g, |t| t * t + 0.5);
        let v = unit(&g, |t| 2.0 - t);
        let op = GridOperator::rank_one(&u, &v, 1.7);
        let out = deflate_orthogonal(&op, &u, &v).unwrap();
        assert!(out.kernel().amax() < 1e-10);
    }

    #[test]
    fn non_unit_function_is_rejected() {
        let g = grid(11);
        let f = GridFunction::from_fn(g.clone(), |_| 2.0);
        let op = random_operator(&g, 2);
        assert!(matches!(
            deflate_orthogonal(&op, &f, &f),
            Err(FgccaError::Normalization { .. })
        ));
    }

    #[test]
    fn uncorrelated_rank_one_annihilates_right_function() {
        let g = grid(19);
        let u = unit(&g, |t| 1.0 + 0.5 * t);
        let v = unit(&g, |t| (3.0 * t).sin() + 0.3);
        let op = GridOperator::rank_one(&u, &v, 0.9);
        let suu = GridOperator::rank_one(&u, &u, 1.0);
        let svv = GridOperator::rank_one(&v, &v, 1.0);
        let out = deflate_uncorrelated(&op, &suu, &svv, &u, &v).unwrap();
        assert!(apply_operator(&out, &v).unwrap().values().amax() < 1e-10);
    }

    #[test]
    fn unit_eigenfunction_reduces_to_orthogonal() {
        let g = grid(23);
        let u = unit(&g, |t| 1.0 + t);
        let w = unit(&g, |t| (5.0 * t).sin());
        let op = random_operator(&g, 3);
        // Σ_jj u = u and Σ_kk w = w
        let suu = GridOperator::rank_one(&u, &u, 1.0);
        let sww = GridOperator::rank_one(&w, &w, 1.0);
        let a = deflate_uncorrelated(&op, &suu, &sww, &u, &w).unwrap();
        let b = deflate_orthogonal(&op, &u, &w).unwrap();
        assert!((a.kernel() - b.kernel()).amax() < 1e-10);
    }

    #[test]
    fn degenerate_component_is_rejected() {
        let g = grid(9);
        let u = unit(&g, |t| t + 1.0);
        let zero = GridOperator::zeros(g.clone(), g.clone());
        assert!(matches!(
            deflate_uncorrelated(&zero, &zero, &zero, &u, &u),
            Err(FgccaError::DegenerateComponent { .. })
        ));
    }

    fn pair_set(g: &Arc<TimeGrid>) -> OperatorSet {
        OperatorSet::from_upper(
            vec![g.clone(), g.clone()],
            vec![spd_operator(g, 4), random_operator(g, 5), spd_operator(g, 6)],
        )
        .unwrap()
    }

    #[test]
    fn one_order_matches_fit_single() {
        let g = grid(15);
        let ops = pair_set(&g);
        let cfg = FgccaConfig::new(2);
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        let single = fit_single(&ops, &cfg).unwrap();
        for j in 0..2 {
            assert_eq!(fit.function(0, j).values(), single.functions[j].values());
        }
        assert_eq!(fit.orders[0].criterion_trace, single.criterion_trace);
    }

    #[test]
    fn orthogonal_mode_gives_orthonormal_functions() {
        let g = grid(25);
        let ops = pair_set(&g);
        let mut cfg = FgccaConfig::new(2);
        cfg.n_components = 3;
        cfg.epsilon = 1e-12;
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        for j in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let ip = inner_product(fit.function(a, j), fit.function(b, j)).unwrap();
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((ip - expected).abs() < 1e-8, "process {j} orders {a},{b}: {ip}");
                }
            }
        }
    }

    #[test]
    fn uncorrelated_mode_consecutive_orthogonality() {
        let g = grid(25);
        let ops = pair_set(&g);
        let mut cfg = FgccaConfig::new(2);
        cfg.n_components = 3;
        cfg.deflation = DeflationMode::Uncorrelated;
        cfg.tau = vec![0.5, 0.5];
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        for j in 0..2 {
            for m in 0..2 {
                let ip = inner_product(fit.function(m, j), fit.function(m + 1, j)).unwrap();
                assert!(ip.abs() < 1e-8, "{ip}");
            }
            assert!(fit.orders.iter().all(|o| o.d.as_ref().unwrap()[j] > 0.0));
        }
    }

    #[test]
    fn bundle_round_trip() {
        let g = grid(11);
        let ops = pair_set(&g);
        let mut cfg = FgccaConfig::new(2);
        cfg.n_components = 2;
        let fit = fit_higher_order(&ops, &cfg).unwrap();
        let json = serde_json::to_string(&fit.to_bundle()).unwrap();
        let back = FgccaFit::from_bundle(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.function(1, 1).values(), fit.function(1, 1).values());
    }
}
