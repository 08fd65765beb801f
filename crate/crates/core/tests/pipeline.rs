use std::collections::BTreeMap;

use fgcca::components::{reconstruct, ScoreBasis, ScoringMethod};
use fgcca::covariance::ProcessModel;
use fgcca::data::{read_csv, ResponseTable};
use fgcca::deflation::FgccaFit;
use fgcca::pipeline::{fit_dataset, FitSettings};
use fgcca::sim::{generate, SimSpec, Sparsity};
use fgcca::solver::DeflationMode;
use fgcca::FgccaError;

fn spec() -> SimSpec {
    SimSpec {
        n_subjects: 60,
        sparsity: Sparsity::Medium,
        n_components: 3,
        seed: 5,
        ..SimSpec::default()
    }
}

fn settings(mode: DeflationMode) -> FitSettings {
    let mut s = FitSettings::default();
    s.estimation.grid_size = 30;
    s.solver.n_components = 3;
    s.solver.deflation = mode;
    s
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn end_to_end_fit_shapes() {
    let data = generate(&spec()).unwrap();
    let out = fit_dataset(&data.dataset, &settings(DeflationMode::Orthogonal), None).unwrap();
    assert_eq!(out.fit.n_components(), 3);
    assert_eq!(out.fit.n_processes(), 3);
    assert_eq!(out.components.to_rows().len(), 60 * 3 * 3);
    assert!(out.model.noise_vars.iter().all(|v| (0.3..3.0).contains(v)));
    let grids = out.score_model.grids();
    let x = &out.components.xi[0];
    let curves = reconstruct(x, ScoreBasis::Coefficients, &out.score_model, &grids).unwrap();
    assert_eq!(curves.len(), 3);
}

#[test]
fn uncorrelated_components_have_zero_correlation() {
    let data = generate(&spec()).unwrap();
    let out = fit_dataset(&data.dataset, &settings(DeflationMode::Uncorrelated), None).unwrap();
    for j in 0..3 {
        for a in 0..3 {
            for b in a + 1..3 {
                let r = correlation(&out.components.y_column(j, a), &out.components.y_column(j, b));
                assert!(r.abs() < 1e-8, "process {j}, orders {a},{b}: {r}");
            }
        }
    }
}

#[test]
fn quadrature_scoring_runs_on_dense_data() {
    let mut s = spec();
    s.sparsity = Sparsity::Dense;
    let data = generate(&s).unwrap();
    let mut settings = settings(DeflationMode::Orthogonal);
    settings.scoring = ScoringMethod::Quadrature { max_gap: Some(0.2) };
    let out = fit_dataset(&data.dataset, &settings, None).unwrap();
    assert_eq!(out.components.xi.len(), 60);
}

#[test]
fn bundles_round_trip_through_json() {
    let data = generate(&spec()).unwrap();
    let out = fit_dataset(&data.dataset, &settings(DeflationMode::Uncorrelated), None).unwrap();
    let model_json = serde_json::to_string(&out.model.to_bundle()).unwrap();
    let model = ProcessModel::from_bundle(&serde_json::from_str(&model_json).unwrap()).unwrap();
    assert_eq!(model.to_bundle(), out.model.to_bundle());
    let fit_json = serde_json::to_string(&out.fit.to_bundle()).unwrap();
    let fit = FgccaFit::from_bundle(&serde_json::from_str(&fit_json).unwrap()).unwrap();
    assert_eq!(serde_json::to_string(&fit.to_bundle()).unwrap(), fit_json);
}

#[test]
fn dataset_round_trips_through_csv() {
    let data = generate(&spec()).unwrap();
    let mut buf = Vec::new();
    data.dataset.write_csv(&mut buf).unwrap();
    let back = read_csv(buf.as_slice(), Some(&data.dataset.sidecar())).unwrap();
    assert_eq!(back, data.dataset);
}

#[test]
fn response_fit_runs_and_records_weights() {
    let data = generate(&spec()).unwrap();
    let rows: BTreeMap<String, Vec<f64>> = data
        .dataset
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), vec![data.scores[(i, 0)], data.scores[(i, 1)]]))
        .collect();
    let table = ResponseTable {
        columns: vec!["a".into(), "b".into()],
        rows,
    };
    let out = fit_dataset(&data.dataset, &settings(DeflationMode::Orthogonal), Some(&table)).unwrap();
    for order in &out.fit.orders {
        let a = order.response_weights.as_ref().unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-10);
        for w in order.criterion_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-10);
        }
    }
}

#[test]
fn missing_response_subject_is_a_validation_error() {
    let data = generate(&spec()).unwrap();
    let table = ResponseTable {
        columns: vec!["a".into()],
        rows: BTreeMap::from([("1".to_string(), vec![1.0])]),
    };
    let err = fit_dataset(&data.dataset, &settings(DeflationMode::Orthogonal), Some(&table)).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(!matches!(err, FgccaError::NumericalFailure(_)));
}
