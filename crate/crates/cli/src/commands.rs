use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fgcca::components::{blup_scores, predict_points, reconstruct, ScoreBasis, ScoreModel};
use fgcca::covariance::{estimate_model, ProcessModel, ProcessModelBundle};
use fgcca::data::{load_csv, read_csv, read_response_csv, summarize, LongitudinalDataset, Sidecar, SparseSample};
use fgcca::deflation::{FgccaFit, FitBundle};
use fgcca::pipeline::{fit_model, FitSettings};
use fgcca::sim::{generate, run_sim1, run_sim2, run_sim3, SimSpec};
use fgcca::solver::Init;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;

/// Parses TOML when the extension is `.toml`, JSON otherwise.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str(&text).map_err(anyhow::Error::from)
    } else {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("invalid configuration in {}", path.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, manifest: &mut ManifestBuilder) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join(name), text + "\n").with_context(|| format!("writing {name}"))?;
    manifest.output(name);
    Ok(())
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T], manifest: &mut ManifestBuilder) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name)).with_context(|| format!("writing {name}"))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    manifest.output(name);
    Ok(())
}

fn load_dataset(data: &Path, sidecar: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<LongitudinalDataset> {
    manifest.input("data", data)?;
    let sidecar = match sidecar {
        Some(p) => {
            manifest.input("sidecar", p)?;
            Some(Sidecar::from_path(p)?)
        }
        None => None,
    };
    Ok(load_csv(data, sidecar.as_ref())?)
}

#[derive(Debug, Serialize)]
struct TraceRow {
    order: usize,
    sweep: usize,
    criterion: f64,
}

#[derive(Serialize)]
struct FitConfigSnapshot<'a> {
    settings: &'a FitSettings,
    solver: &'a fgcca::solver::FgccaConfig,
}

pub struct FitArgs<'a> {
    pub data: &'a Path,
    pub sidecar: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub response: Option<&'a Path>,
    pub seed: Option<u64>,
}

pub fn fit(args: FitArgs, out: &Path, manifest: &mut ManifestBuilder) -> Result<()> {
    let mut settings: FitSettings = match args.config {
        Some(p) => {
            manifest.input("config", p)?;
            read_config(p)?
        }
        None => FitSettings::default(),
    };
    if let (Some(seed), Init::Random { .. }) = (args.seed, settings.solver.init) {
        settings.solver.init = Init::Random { seed };
    }
    let seed = match settings.solver.init {
        Init::Random { seed } => Some(seed),
        Init::DeterministicSvd => args.seed,
    };
    manifest.seed(seed);
    let dataset = load_dataset(args.data, args.sidecar, manifest)?;
    let response = match args.response {
        Some(p) => {
            manifest.input("response", p)?;
            Some(read_response_csv(
                File::open(p).with_context(|| format!("opening {}", p.display()))?,
            )?)
        }
        None => None,
    };
    dataset.require_observed()?;
    let n = dataset.n_processes();
    settings.estimation.validate(n)?;
    let config = settings.solver.resolve(n)?;
    manifest.config(&FitConfigSnapshot {
        settings: &settings,
        solver: &config,
    })?;

    let model = manifest.time("estimate", || estimate_model(&dataset, &settings.estimation))?;
    let output = manifest.time("fit", || {
        fit_model(&dataset, &settings, &config, model, response.as_ref())
    })?;

    write_json(out, "model.json", &output.model.to_bundle(), manifest)?;
    write_json(out, "fit.json", &output.fit.to_bundle(), manifest)?;
    write_csv(out, "components.csv", &output.components.to_rows(), manifest)?;
    let trace: Vec<TraceRow> = output
        .fit
        .orders
        .iter()
        .flat_map(|o| {
            o.criterion_trace
                .iter()
                .enumerate()
                .map(move |(sweep, &criterion)| TraceRow {
                    order: o.order,
                    sweep,
                    criterion,
                })
        })
        .collect();
    write_csv(out, "trace.csv", &trace, manifest)
}

/// Which benchmark, or plain data generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Simulation {
    Sim1,
    Sim2,
    Sim3,
    Data,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub simulation: Simulation,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Subject counts swept by the third simulation.
    #[serde(default)]
    pub subject_counts: Vec<usize>,
    #[serde(default)]
    pub design: SimSpec,
}

fn default_replicates() -> usize {
    20
}

#[derive(Serialize)]
struct ScoreRow {
    subject_id: String,
    process_id: usize,
    order: usize,
    xi: f64,
}

pub fn simulate(
    spec_path: &Path,
    replicates: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<()> {
    manifest.input("spec", spec_path)?;
    let mut file: SimulationFile = read_config(spec_path)?;
    if let Some(r) = replicates {
        file.replicates = r;
    }
    if let Some(s) = seed {
        file.design.seed = s;
    }
    file.design.validate()?;
    if file.replicates == 0 && file.simulation != Simulation::Data {
        bail!(fgcca::FgccaError::InvalidConfig("replicates must be positive".into()));
    }
    manifest.seed(Some(file.design.seed));
    manifest.config(&file)?;
    let report = match file.simulation {
        Simulation::Sim1 => manifest.time("simulate", || run_sim1(&file.design, file.replicates))?,
        Simulation::Sim2 => manifest.time("simulate", || run_sim2(&file.design, file.replicates))?,
        Simulation::Sim3 => manifest.time("simulate", || {
            run_sim3(&file.design, file.replicates, &file.subject_counts)
        })?,
        Simulation::Data => {
            let data = manifest.time("simulate", || generate(&file.design))?;
            let mut w = File::create(out.join("data.csv"))?;
            data.dataset.write_csv(&mut w)?;
            manifest.output("data.csv");
            write_json(out, "sidecar.json", &data.dataset.sidecar(), manifest)?;
            let m = file.design.n_basis;
            let rows: Vec<ScoreRow> = data
                .dataset
                .subjects()
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    let scores = &data.scores;
                    (0..file.design.n_processes).flat_map(move |j| {
                        (0..m).map(move |c| ScoreRow {
                            subject_id: s.id.clone(),
                            process_id: j + 1,
                            order: c + 1,
                            xi: scores[(i, j * m + c)],
                        })
                    })
                })
                .collect();
            return write_csv(out, "scores.csv", &rows, manifest);
        }
    };
    let stem = report.file_stem();
    report.write(out)?;
    manifest.output(&format!("{stem}.csv"));
    manifest.output(&format!("{stem}.json"));
    if report.failure_count() > 0 {
        log::warn!("{} of {} replicates failed", report.failure_count(), file.replicates);
    }
    Ok(())
}

struct LoadedModel {
    model: ProcessModel,
    score_model: ScoreModel,
}

fn load_model(dir: &Path, manifest: &mut ManifestBuilder) -> Result<LoadedModel> {
    let model_path = dir.join("model.json");
    let fit_path = dir.join("fit.json");
    manifest.input("model", &model_path)?;
    manifest.input("fit", &fit_path)?;
    let bundle: ProcessModelBundle = read_config(&model_path)?;
    let fit_bundle: FitBundle = read_config(&fit_path)?;
    let model = ProcessModel::from_bundle(&bundle)?;
    let fit = FgccaFit::from_bundle(&fit_bundle)?;
    let score_model = ScoreModel::from_fit(&model, &fit)?;
    Ok(LoadedModel { model, score_model })
}

fn model_sidecar(model: &ProcessModel) -> Sidecar {
    Sidecar {
        n_processes: Some(model.n_processes()),
        intervals: Some(model.grids.iter().map(|g| [g.lower(), g.upper()]).collect()),
        labels: None,
    }
}

/// Rows with no data lines load as an empty set of subjects.
fn load_partial(path: &Path, model: &ProcessModel) -> Result<Option<LongitudinalDataset>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.lines().skip(1).all(|l| l.trim().is_empty()) {
        return Ok(None);
    }
    Ok(Some(read_csv(text.as_bytes(), Some(&model_sidecar(model)))?))
}

#[derive(Debug, Deserialize)]
struct TargetRow {
    subject_id: String,
    process_id: usize,
    time: f64,
    #[serde(default)]
    value: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PredictionRow {
    subject_id: String,
    process_id: usize,
    time: f64,
    prediction: f64,
    observed: Option<f64>,
    squared_error: Option<f64>,
}

pub fn predict(
    model_dir: &Path,
    partial: &Path,
    targets: &Path,
    out: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<()> {
    let loaded = load_model(model_dir, manifest)?;
    manifest.input("partial", partial)?;
    manifest.input("targets", targets)?;
    let dataset = load_partial(partial, &loaded.model)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(targets)
        .with_context(|| format!("reading {}", targets.display()))?;
    let mut by_subject: BTreeMap<String, Vec<TargetRow>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (line, row) in rdr.deserialize::<TargetRow>().enumerate() {
        let row = row.map_err(|e| fgcca::FgccaError::Parse {
            line: line as u64 + 2,
            message: e.to_string(),
        })?;
        if row.process_id == 0 || row.process_id > loaded.model.n_processes() {
            bail!(fgcca::FgccaError::Range {
                line: line as u64 + 2,
                message: format!(
                    "process_id {} outside 1..={}",
                    row.process_id,
                    loaded.model.n_processes()
                ),
            });
        }
        if !by_subject.contains_key(&row.subject_id) {
            order.push(row.subject_id.clone());
        }
        by_subject.entry(row.subject_id.clone()).or_default().push(row);
    }
    let n = loaded.model.n_processes();
    let empty: Vec<SparseSample> = vec![SparseSample::default(); n];
    let mut rows = Vec::new();
    for id in &order {
        let targets = &by_subject[id];
        let samples = match dataset
            .as_ref()
            .and_then(|d| d.subject_index(id).map(|i| &d.subjects()[i].samples))
        {
            Some(s) => s,
            None => {
                log::warn!("subject {id} has no observations; predicting the mean function");
                &empty
            }
        };
        let points: Vec<(usize, f64)> = targets.iter().map(|t| (t.process_id - 1, t.time)).collect();
        let predicted = predict_points(samples, &loaded.score_model, &points)?;
        for (t, p) in targets.iter().zip(predicted) {
            rows.push(PredictionRow {
                subject_id: id.clone(),
                process_id: t.process_id,
                time: t.time,
                prediction: p,
                observed: t.value,
                squared_error: t.value.map(|v| (v - p).powi(2)),
            });
        }
    }
    write_csv(out, "predictions.csv", &rows, manifest)
}

#[derive(Debug, Serialize)]
struct CurveRow {
    subject_id: String,
    process_id: usize,
    time: f64,
    value: f64,
}

pub fn reconstruct_cmd(
    model_dir: &Path,
    data: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<()> {
    let loaded = load_model(model_dir, manifest)?;
    let sidecar_default = model_sidecar(&loaded.model);
    manifest.input("data", data)?;
    let dataset = match sidecar {
        Some(p) => {
            manifest.input("sidecar", p)?;
            load_csv(data, Some(&Sidecar::from_path(p)?))?
        }
        None => load_csv(data, Some(&sidecar_default))?,
    };
    if dataset.n_processes() != loaded.model.n_processes() {
        bail!(fgcca::FgccaError::Dimension(format!(
            "data has {} processes, the model {}",
            dataset.n_processes(),
            loaded.model.n_processes()
        )));
    }
    let grids = loaded.score_model.grids();
    let mut rows = Vec::new();
    for s in dataset.subjects() {
        let xi = blup_scores(&s.samples, &loaded.score_model)?;
        let curves = reconstruct(&xi, ScoreBasis::Coefficients, &loaded.score_model, &grids)?;
        for (j, c) in curves.iter().enumerate() {
            for (t, v) in c.grid().points().iter().zip(c.values().iter()) {
                rows.push(CurveRow {
                    subject_id: s.id.clone(),
                    process_id: j + 1,
                    time: *t,
                    value: *v,
                });
            }
        }
    }
    write_csv(out, "reconstructions.csv", &rows, manifest)
}

#[derive(Serialize)]
struct DatasetSummary {
    n_subjects: usize,
    n_processes: usize,
    intervals: Vec<(f64, f64)>,
    processes: Vec<fgcca::data::ProcessSummary>,
}

pub fn summarize_cmd(data: &Path, sidecar: Option<&Path>, out: &Path, manifest: &mut ManifestBuilder) -> Result<()> {
    let dataset = load_dataset(data, sidecar, manifest)?;
    let summary = DatasetSummary {
        n_subjects: dataset.n_subjects(),
        n_processes: dataset.n_processes(),
        intervals: dataset.intervals().to_vec(),
        processes: summarize(&dataset),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    write_json(out, "summary.json", &summary, manifest)
}

/// Creates the output directory, refusing to reuse an input file's path.
pub fn prepare_out(out: &Path) -> Result<PathBuf> {
    if out.is_file() {
        bail!(fgcca::FgccaError::InvalidConfig(format!("{} is a file", out.display())));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}
