//! `fgcca` command-line front end.

mod commands;
mod manifest;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fgcca::FgccaError;

use commands::FitArgs;
use manifest::ManifestBuilder;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fgcca",
    version,
    about = "Functional generalized canonical correlation analysis"
)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of random initialization or of a simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "fgcca-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the model and fit canonical functions and components.
    Fit {
        /// Long-format CSV: subject_id, process_id, time, value.
        data: PathBuf,
        /// TOML or JSON settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON sidecar with process count, intervals and labels.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// CSV of subject_id plus numeric response columns.
        #[arg(long)]
        response: Option<PathBuf>,
    },
    /// Run a simulation benchmark or generate a synthetic dataset.
    Simulate {
        /// TOML or JSON simulation file.
        spec: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Predict values at target times from partial observations.
    Predict {
        /// Directory written by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Long-format CSV of the observations to condition on.
        #[arg(long)]
        partial: PathBuf,
        /// CSV of subject_id, process_id, time and optionally value.
        #[arg(long)]
        targets: PathBuf,
    },
    /// Reconstruct trajectories on the model grids.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Per-process observation counts of a dataset.
    Summarize {
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Simulate { .. } => "simulate",
            Command::Predict { .. } => "predict",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Summarize { .. } => "summarize",
        }
    }
}

fn run(cli: &Cli, manifest: &mut ManifestBuilder) -> anyhow::Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Fit {
            data,
            config,
            sidecar,
            response,
        } => commands::fit(
            FitArgs {
                data,
                sidecar: sidecar.as_deref(),
                config: config.as_deref(),
                response: response.as_deref(),
                seed: cli.seed,
            },
            out,
            manifest,
        ),
        Command::Simulate { spec, replicates } => commands::simulate(spec, *replicates, cli.seed, out, manifest),
        Command::Predict {
            model,
            partial,
            targets,
        } => commands::predict(model, partial, targets, out, manifest),
        Command::Reconstruct { model, data, sidecar } => {
            commands::reconstruct_cmd(model, data, sidecar.as_deref(), out, manifest)
        }
        Command::Summarize { data, sidecar } => commands::summarize_cmd(data, sidecar.as_deref(), out, manifest),
    }
}

/// Numerical failures exit with 3; everything else the user can fix, 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<FgccaError>()) {
        Some(e) if !e.is_validation() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    runlog::install();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let out = match commands::prepare_out(&cli.out) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut manifest = ManifestBuilder::new(cli.command.name());
    let result = run(&cli, &mut manifest);
    if let Err(e) = &result {
        log::error!("{e:#}");
    }
    let warnings = runlog::warning_count();
    if let Err(e) = runlog::write(&out) {
        eprintln!("error: cannot write run.log: {e}");
    }
    match result {
        Ok(()) => match manifest.write(&out, warnings) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: cannot write manifest.json: {e}");
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
