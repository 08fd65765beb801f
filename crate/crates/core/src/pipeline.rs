//! End-to-end fit: estimate the process model, fit canonical functions,
//! build the score model and score every subject.

use serde::{Deserialize, Serialize};

use crate::components::{score_dataset, ComponentSet, ScoreModel, ScoringMethod};
use crate::covariance::{estimate_model, EstimationConfig, ProcessModel};
use crate::data::{LongitudinalDataset, ResponseTable};
use crate::deflation::{fit_higher_order, FgccaFit};
use crate::error::{FgccaError, Result};
use crate::response::{align_response, estimate_response_block, fit_with_response, ResponseBlock};
use crate::solver::{full_design, DeflationMode, FgccaConfig, Init, Scheme};

/// `τ` for every process, or one value per process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    Common(f64),
    PerProcess(Vec<f64>),
}

/// Solver settings whose process-dependent parts are filled in once the
/// number of processes is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Connection matrix; fully connected when absent.
    pub design: Option<Vec<Vec<f64>>>,
    pub tau: TauSetting,
    pub scheme: Scheme,
    pub epsilon: f64,
    pub max_iters: usize,
    pub n_components: usize,
    pub deflation: DeflationMode,
    pub init: Init,
    pub sign_convention: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let base = FgccaConfig::new(1);
        Self {
            design: None,
            tau: TauSetting::Common(1.0),
            scheme: base.scheme,
            epsilon: base.epsilon,
            max_iters: base.max_iters,
            n_components: base.n_components,
            deflation: base.deflation,
            init: base.init,
            sign_convention: base.sign_convention,
        }
    }
}

impl SolverSettings {
    pub fn resolve(&self, n_processes: usize) -> Result<FgccaConfig> {
        let tau = match &self.tau {
            TauSetting::Common(t) => vec![*t; n_processes],
            TauSetting::PerProcess(t) => t.clone(),
        };
        let config = FgccaConfig {
            design: self.design.clone().unwrap_or_else(|| full_design(n_processes)),
            tau,
            scheme: self.scheme,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            n_components: self.n_components,
            deflation: self.deflation,
            init: self.init,
            sign_convention: self.sign_convention,
        };
        config.validate(n_processes)?;
        Ok(config)
    }
}

/// Everything a fit run reads from its configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub estimation: EstimationConfig,
    pub solver: SolverSettings,
    pub scoring: ScoringMethod,
    /// Scale response columns to unit variance after centering.
    pub standardize_response: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            estimation: EstimationConfig::default(),
            solver: SolverSettings::default(),
            scoring: ScoringMethod::Blup,
            standardize_response: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub config: FgccaConfig,
    pub model: ProcessModel,
    pub fit: FgccaFit,
    pub score_model: ScoreModel,
    pub components: ComponentSet,
    pub response: Option<ResponseBlock>,
}

/// Runs the whole chain on a dataset, optionally with a response table.
pub fn fit_dataset(
    dataset: &LongitudinalDataset,
    settings: &FitSettings,
    response: Option<&ResponseTable>,
) -> Result<FitOutput> {
    dataset.require_observed()?;
    let n = dataset.n_processes();
    let config = settings.solver.resolve(n)?;
    settings.estimation.validate(n)?;
    let model = estimate_model(dataset, &settings.estimation)?;
    fit_model(dataset, settings, &config, model, response)
}

/// The chain after estimation, for callers holding a model already.
pub fn fit_model(
    dataset: &LongitudinalDataset,
    settings: &FitSettings,
    config: &FgccaConfig,
    model: ProcessModel,
    response: Option<&ResponseTable>,
) -> Result<FitOutput> {
    let normalize = settings.estimation.normalize;
    let ops = model.operators(normalize);
    let (fit, block) = match response {
        None => (fit_higher_order(&ops, config)?, None),
        Some(table) => {
            if table.columns.is_empty() {
                return Err(FgccaError::Schema("response table has no value columns".into()));
            }
            let y = align_response(table, dataset, settings.standardize_response)?;
            let block = estimate_response_block(
                dataset,
                y,
                table.columns.clone(),
                &model.means,
                &model.bandwidths.process,
            )?;
            let weights = normalize.then_some(model.norm_weights.as_slice());
            let fit = fit_with_response(&ops, &block.kernels(weights), config)?;
            (fit, Some(block))
        }
    };
    let score_model = ScoreModel::from_fit(&model, &fit)?;
    let components = score_dataset(dataset, &score_model, settings.scoring)?;
    Ok(FitOutput {
        config: config.clone(),
        model,
        fit,
        score_model,
        components,
        response: block,
    })
}
